"""
数据重塑

短格式 -> 计数过程长格式 (每个完成的访视区间一行)，以及按假设暴露 A* 复制 P 份的扩展表。

长格式列: id, Start, Stop, Status, A, M_t, M_t-1, ..., <conf>_t, <conf>_t-1, ..., <基线协变量>
扩展表在 A 之后插入 Astar。以下划线开头的列 (_visit, _last, _row) 仅供内部使用，不写入 CSV。
"""

import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from .dataset import TIME_TOL, Dataset, VisitSchedule
from .errors import DataFormatError, InvalidConfigValue

logger = logging.getLogger(__name__)

MEDIATOR = "M"
EXPOSURE = "A"
HYPOTHETICAL = "Astar"
# 未测量历史的填充值
PADDING = 0.0


def floor_visit(t: float, schedule: VisitSchedule) -> int:
    """严格早于 t 完成的访视个数 k (t 恰为访视时刻 t_k 时返回 k-1)"""
    times = np.asarray(schedule.visit_times)
    return int(np.sum(times < t - TIME_TOL))


def floor_time(t: float, schedule: VisitSchedule) -> float:
    """
    ⌊t⌋: t 之前最后一次已有测量的访视时刻

    t = t_k 时返回 t_{k-1}；t_k < t < t_{k+1} 时返回 t_k；t <= t_1 时返回 0。

    Args:
        t: 时刻 (>= 0)
        schedule: 访视时间表

    Returns:
        访视时刻
    """
    if t < 0:
        raise InvalidConfigValue(f"时刻必须非负: {t}")
    return schedule.time_of(floor_visit(t, schedule))


def lag_name(base: str, lag: int) -> str:
    """M_t, M_t-1, ..."""
    return f"{base}_t" if lag == 0 else f"{base}_t-{lag}"


def mediator_columns(depth: int) -> List[str]:
    return [lag_name(MEDIATOR, lag) for lag in range(depth)]


def confounder_columns(name: str, depth: int) -> List[str]:
    return [lag_name(name, lag) for lag in range(depth)]


def long_columns(dataset: Dataset, depth: int) -> List[str]:
    columns = ['id', 'Start', 'Stop', 'Status', EXPOSURE] + mediator_columns(depth)
    for name in dataset.variables.confounders:
        columns += confounder_columns(name, depth)
    return columns + list(dataset.variables.baseline_names)


def _history(values: List[Optional[float]], visit: int, depth: int) -> List[float]:
    """第 visit 次访视时的历史 [x_visit, x_visit-1, ...]，visit 0 及之前填充"""
    out = []
    for lag in range(depth):
        k = visit - lag
        value = values[k - 1] if k >= 1 else None
        out.append(PADDING if value is None else float(value))
    return out


def to_counting_process(dataset: Dataset, history_depth: Optional[int] = None) -> pd.DataFrame:
    """
    短格式 -> 计数过程长格式

    每个受试者的行划分 [0, 随访时间]，断点为早于随访时间的访视时刻；
    最后一行携带受试者的状态，其余行状态为 0。

    Args:
        dataset: 已通过校验的数据集
        history_depth: 携带的中介/混杂历史长度，默认 K

    Returns:
        长格式表 (含内部列 _visit, _last, _row)

    Raises:
        DataFormatError: 随访时间为 0
    """
    schedule = dataset.schedule
    depth = schedule.K if history_depth is None else int(history_depth)
    if depth < 1:
        raise InvalidConfigValue(f"history_depth 必须 >= 1: {depth}")
    confounders = dataset.variables.confounders
    baseline_names = dataset.variables.baseline_names

    records = []
    for subject in dataset.subjects:
        t = subject.followup_time
        if t <= 0:
            raise DataFormatError(f"id={subject.id} 的随访时间为 0，无法构造区间")
        last_visit = floor_visit(t, schedule)
        conf_series = {
            name: [(c or {}).get(name) for c in subject.confounders_by_visit]
            for name in confounders
        }
        baseline = [float(subject.baseline_covariates[n]) for n in baseline_names]

        for visit in range(last_visit + 1):
            is_last = visit == last_visit
            row = [
                subject.id,
                schedule.time_of(visit),
                t if is_last else schedule.time_of(visit + 1),
                int(subject.status) if is_last else 0,
                int(subject.exposure),
            ]
            row += _history(list(subject.mediator_by_visit), visit, depth)
            for name in confounders:
                row += _history(conf_series[name], visit, depth)
            row += baseline
            records.append(row + [visit, is_last])

    columns = long_columns(dataset, depth)
    frame = pd.DataFrame.from_records(records, columns=columns + ['_visit', '_last'])
    frame['_row'] = np.arange(len(frame))
    logger.debug("长格式: %d 个受试者 -> %d 行", len(dataset), len(frame))
    return frame


def expand_counterfactual(rows: pd.DataFrame, P: int) -> pd.DataFrame:
    """
    按假设暴露 A* 将长格式表复制 P 份

    第一份 A* = A，其余各份依次取其它暴露值 (升序)；case_weight 初始化为 1。

    Args:
        rows: 长格式表
        P: 暴露水平数 (>= 2)

    Returns:
        扩展表，行数为 P × len(rows)
    """
    if P < 2:
        raise InvalidConfigValue(f"暴露水平数 P 必须 >= 2: {P}")
    exposure = rows[EXPOSURE].to_numpy(dtype=int)
    if np.any((exposure < 0) | (exposure >= P)):
        raise InvalidConfigValue(f"暴露取值超出 0..{P - 1}")

    # others[a] = 除 a 以外的暴露值 (升序)
    others = np.array([[v for v in range(P) if v != a] for a in range(P)])
    blocks = []
    for block in range(P):
        copy = rows.copy()
        astar = exposure if block == 0 else others[exposure, block - 1]
        copy.insert(copy.columns.get_loc(EXPOSURE) + 1, HYPOTHETICAL, astar)
        copy['case_weight'] = 1.0
        blocks.append(copy)
    return pd.concat(blocks, ignore_index=True)


def public_columns(frame: pd.DataFrame) -> List[str]:
    return [c for c in frame.columns if not c.startswith('_') and c != 'case_weight']


def write_table(frame: pd.DataFrame, path: str) -> None:
    """写出长格式或扩展表 (不含内部列)"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame[public_columns(frame)].to_csv(path, index=False, lineterminator='\n')
