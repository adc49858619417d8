"""
纵向中介数据集的核心类型与校验

短格式 (每个受试者一行) 数据的领域类型、CSV 读写以及校验规则。
CSV 列: id, time, status, a, m1..mK, <conf>_0..<conf>_K, <基线协变量>；
空单元格表示未测量。
"""

import hashlib
import math
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import DataFormatError, InvalidConfigValue

# 时间比较容差 (visit 时间的浮点运算)
TIME_TOL = 1e-9


class EventStatus(IntEnum):
    """事件状态码"""
    CENSORED = 0
    MAIN_EVENT = 1
    COMPETING_EVENT = 2


@dataclass(frozen=True)
class VisitSchedule:
    """访视时间表 t_1 < t_2 < ... < t_K (t_0 = 0 隐含)"""
    visit_times: Tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.visit_times)
        object.__setattr__(self, 'visit_times', times)
        if not times:
            raise InvalidConfigValue("visit_times 至少需要一个访视时间")
        if times[0] <= 0 or any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidConfigValue(f"visit_times 必须严格递增且大于 0: {list(times)}")

    @property
    def K(self) -> int:
        return len(self.visit_times)

    def time_of(self, k: int) -> float:
        """第 k 次访视的时间，k=0 返回 0"""
        return 0.0 if k == 0 else self.visit_times[k - 1]


@dataclass(frozen=True)
class ColumnRoles:
    """短格式 CSV 的列角色"""
    id: str = "id"
    time: str = "time"
    status: str = "status"
    exposure: str = "a"
    mediator: str = "m"
    confounders: Tuple[str, ...] = ()
    baseline: Tuple[str, ...] = ()

    def mediator_column(self, k: int) -> str:
        return f"{self.mediator}{k}"

    @staticmethod
    def confounder_column(name: str, k: int) -> str:
        return f"{name}_{k}"


@dataclass(frozen=True)
class VariableSpec:
    """变量声明: 列角色、暴露水平数 P、中介水平数 Q+1"""
    roles: ColumnRoles
    exposure_levels: int
    mediator_levels: int

    @property
    def confounders(self) -> Tuple[str, ...]:
        return self.roles.confounders

    @property
    def baseline_names(self) -> Tuple[str, ...]:
        """基线协变量名: 声明的基线协变量 + 每个纵向混杂的基线值 <conf>_0"""
        conf0 = tuple(ColumnRoles.confounder_column(c, 0) for c in self.roles.confounders)
        return tuple(self.roles.baseline) + tuple(c for c in conf0 if c not in self.roles.baseline)


@dataclass(frozen=True)
class SubjectRecord:
    """单个受试者的短格式记录"""
    id: str
    exposure: int
    baseline_covariates: Mapping[str, float]
    followup_time: float
    status: EventStatus
    mediator_by_visit: Tuple[Optional[float], ...]
    confounders_by_visit: Tuple[Optional[Mapping[str, Optional[float]]], ...]


@dataclass(frozen=True)
class Dataset:
    """受试者集合 + 访视时间表 + 变量声明"""
    subjects: Tuple[SubjectRecord, ...]
    schedule: VisitSchedule
    variables: VariableSpec

    def __len__(self) -> int:
        return len(self.subjects)


@dataclass(frozen=True)
class Finding:
    """一条校验结果"""
    subject_id: str
    field: str
    rule: str

    def __str__(self) -> str:
        return f"id={self.subject_id} field={self.field} rule={self.rule}"


def _is_present(value) -> bool:
    if value is None:
        return False
    try:
        return not math.isnan(float(value))
    except (TypeError, ValueError):
        return True


def validate(dataset: Dataset) -> List[Finding]:
    """
    校验数据集

    每个 SubjectRecord 的不变量都成立时返回空列表。

    Args:
        dataset: 待校验的数据集

    Returns:
        校验结果列表 (不抛出异常)
    """
    findings: List[Finding] = []
    schedule = dataset.schedule
    variables = dataset.variables
    roles = variables.roles
    seen = set()

    for subject in dataset.subjects:
        sid = str(subject.id)
        if sid in seen:
            findings.append(Finding(sid, roles.id, "duplicate id"))
        seen.add(sid)

        t = subject.followup_time
        if t is None or not np.isfinite(t):
            findings.append(Finding(sid, roles.time, "non-finite value"))
            continue
        if t < 0:
            findings.append(Finding(sid, roles.time, "negative follow-up time"))

        if not (isinstance(subject.exposure, (int, np.integer))
                and 0 <= subject.exposure < variables.exposure_levels):
            findings.append(Finding(sid, roles.exposure, "exposure out of range"))

        for name in variables.baseline_names:
            value = subject.baseline_covariates.get(name)
            if not _is_present(value) or not np.isfinite(float(value)):
                findings.append(Finding(sid, name, "non-finite value"))

        if (len(subject.mediator_by_visit) != schedule.K
                or len(subject.confounders_by_visit) != schedule.K):
            findings.append(Finding(sid, roles.mediator, "schedule length mismatch"))
            continue

        for k, t_k in enumerate(schedule.visit_times, start=1):
            at_risk = t > t_k + TIME_TOL
            m = subject.mediator_by_visit[k - 1]
            m_field = roles.mediator_column(k)
            if _is_present(m):
                if not at_risk:
                    findings.append(Finding(sid, m_field, "measurement after event"))
                elif float(m) != int(float(m)) or not 0 <= int(float(m)) < variables.mediator_levels:
                    findings.append(Finding(sid, m_field, "mediator out of range"))
            elif at_risk:
                findings.append(Finding(sid, m_field, "missing measurement while at risk"))

            conf = subject.confounders_by_visit[k - 1] or {}
            for name in variables.confounders:
                c_field = ColumnRoles.confounder_column(name, k)
                if _is_present(conf.get(name)):
                    if not at_risk:
                        findings.append(Finding(sid, c_field, "measurement after event"))
                elif at_risk:
                    findings.append(Finding(sid, c_field, "missing measurement while at risk"))

    return findings


def _cell(value) -> Optional[float]:
    """CSV 单元格 -> 数值或 None"""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    if pd.isna(value):
        return None
    number = float(value)
    return int(number) if number.is_integer() else number


def frame_to_dataset(frame: pd.DataFrame, schedule: VisitSchedule, variables: VariableSpec) -> Dataset:
    """
    将短格式 DataFrame 转换为 Dataset

    Args:
        frame: 短格式数据
        schedule: 访视时间表
        variables: 变量声明

    Returns:
        数据集

    Raises:
        DataFormatError: 缺少列或状态码无效
    """
    roles = variables.roles
    required = [roles.id, roles.time, roles.status, roles.exposure]
    required += [roles.mediator_column(k) for k in range(1, schedule.K + 1)]
    required += [ColumnRoles.confounder_column(c, k)
                 for c in roles.confounders for k in range(1, schedule.K + 1)]
    required += list(variables.baseline_names)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataFormatError(f"数据缺少列: {', '.join(missing)}")

    subjects = []
    for row in frame.to_dict(orient='records'):
        sid = str(row[roles.id])
        try:
            status = EventStatus(int(row[roles.status]))
        except (TypeError, ValueError):
            raise DataFormatError(f"id={sid} 的状态码无效: {row[roles.status]}")

        exposure = _cell(row[roles.exposure])
        mediators = tuple(_cell(row[roles.mediator_column(k)]) for k in range(1, schedule.K + 1))
        confounders = []
        for k in range(1, schedule.K + 1):
            values = {c: _cell(row[ColumnRoles.confounder_column(c, k)]) for c in roles.confounders}
            confounders.append(values if any(v is not None for v in values.values()) else None)

        subjects.append(SubjectRecord(
            id=sid,
            exposure=exposure if exposure is not None else -1,
            baseline_covariates={name: _cell(row[name]) for name in variables.baseline_names},
            followup_time=float(row[roles.time]),
            status=status,
            mediator_by_visit=mediators,
            confounders_by_visit=tuple(confounders),
        ))

    return Dataset(subjects=tuple(subjects), schedule=schedule, variables=variables)


def read_dataset(path: str, schedule: VisitSchedule, variables: VariableSpec) -> Dataset:
    """
    读取短格式 CSV

    Args:
        path: CSV 文件路径
        schedule: 访视时间表
        variables: 变量声明

    Returns:
        数据集
    """
    try:
        frame = pd.read_csv(path, dtype={variables.roles.id: str})
    except (OSError, pd.errors.ParserError) as e:
        raise DataFormatError(f"无法读取数据文件 {path}: {e}")
    return frame_to_dataset(frame, schedule, variables)


def dataset_to_frame(dataset: Dataset) -> pd.DataFrame:
    """Dataset -> 短格式 DataFrame (列顺序固定)"""
    roles = dataset.variables.roles
    K = dataset.schedule.K
    columns = [roles.id, roles.time, roles.status, roles.exposure]
    columns += [roles.mediator_column(k) for k in range(1, K + 1)]
    for c in roles.confounders:
        columns += [ColumnRoles.confounder_column(c, k) for k in range(0, K + 1)]
    columns += [b for b in roles.baseline if b not in columns]

    records = []
    for s in dataset.subjects:
        row: Dict[str, object] = {
            roles.id: s.id,
            roles.time: s.followup_time,
            roles.status: int(s.status),
            roles.exposure: s.exposure,
        }
        for k in range(1, K + 1):
            row[roles.mediator_column(k)] = s.mediator_by_visit[k - 1]
            conf = s.confounders_by_visit[k - 1] or {}
            for c in roles.confounders:
                row[ColumnRoles.confounder_column(c, k)] = conf.get(c)
        for name, value in s.baseline_covariates.items():
            row[name] = value
        records.append(row)

    return pd.DataFrame.from_records(records, columns=columns).astype(object)


def write_dataset(dataset: Dataset, path: str) -> None:
    """写出短格式 CSV"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    dataset_to_frame(dataset).to_csv(path, index=False, lineterminator='\n')


def data_checksum(dataset: Dataset) -> str:
    """规范化短格式 CSV 的 SHA-256"""
    text = dataset_to_frame(dataset).to_csv(index=False, lineterminator='\n')
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def subjects_frame(dataset: Dataset) -> pd.DataFrame:
    """受试者级数据: id, A 及基线协变量 (用于暴露模型)"""
    names = dataset.variables.baseline_names
    records = [
        {'id': s.id, 'A': s.exposure, **{n: s.baseline_covariates.get(n) for n in names}}
        for s in dataset.subjects
    ]
    frame = pd.DataFrame.from_records(records, columns=['id', 'A', *names])
    for n in names:
        frame[n] = frame[n].astype(float)
    return frame


def resample(dataset: Dataset, indices: Sequence[int]) -> Dataset:
    """
    按下标有放回抽样，生成 id 唯一的 bootstrap 数据集

    Args:
        dataset: 原始数据集
        indices: 受试者下标序列

    Returns:
        新数据集，id 形如 <原 id>#<位置>
    """
    subjects = tuple(
        replace(dataset.subjects[i], id=f"{dataset.subjects[i].id}#{pos}")
        for pos, i in enumerate(indices)
    )
    return replace(dataset, subjects=subjects)
