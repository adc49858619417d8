"""
分析配置

JSON 配置文件 -> 冻结的数据类。缺少必需键时抛出 MissingConfigKey (详情为点分键路径)，
取值非法时抛出 InvalidConfigValue。每个配置类都提供 to_dict() 用于规范化输出。
"""

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .dataset import ColumnRoles, Dataset, EventStatus, Finding, VariableSpec, VisitSchedule
from .engines.design import ModelFormula
from .errors import ConfigError, InvalidConfigValue, MissingConfigKey
from .reshape import EXPOSURE, confounder_columns, mediator_columns

# 中介模型可引用的访视时刻项
VISIT_TIME = "visit_time"


class ModelKind(str, Enum):
    """自然效应模型形式"""
    NO_INTERACTION = "no_interaction"                    # 模型 (1)
    INTERACTION = "interaction"                          # 模型 (2)
    CONDITIONAL_ON_BASELINE = "conditional_on_baseline"  # 模型 (5)


class CensoringMode(str, Enum):
    """删失权重模式"""
    NONE = "none"
    EXPOSURE_ONLY = "exposure_only"
    HISTORY_UNSTABILIZED = "history_unstabilized"
    HISTORY_STABILIZED = "history_stabilized"


# 命令行 --censoring 的取值
CLI_CENSORING = {
    'none': CensoringMode.NONE,
    'exposure': CensoringMode.EXPOSURE_ONLY,
    'history': CensoringMode.HISTORY_STABILIZED,
    'history-unstabilized': CensoringMode.HISTORY_UNSTABILIZED,
}


@dataclass(frozen=True)
class AnalysisSpec:
    model_kind: ModelKind = ModelKind.NO_INTERACTION
    causes: Tuple[int, ...] = (1, 2)
    censoring_mode: CensoringMode = CensoringMode.NONE
    contrasts: Tuple[Tuple[int, int], ...] = ((0, 1),)
    bootstrap_replicates: int = 5000
    seed: int = 0
    truncate_pct: Optional[float] = None
    baseline_interaction: bool = False
    baseline_reference: Mapping[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'model': self.model_kind.value,
            'causes': list(self.causes),
            'censoring': self.censoring_mode.value,
            'contrasts': [list(c) for c in self.contrasts],
            'bootstrap': self.bootstrap_replicates,
            'seed': self.seed,
            'truncate_pct': self.truncate_pct,
            'baseline_interaction': self.baseline_interaction,
            'baseline_reference': dict(self.baseline_reference),
        }


@dataclass(frozen=True)
class AnalysisConfig:
    """完整的分析配置"""
    schedule: VisitSchedule
    variables: VariableSpec
    treatment_model: ModelFormula
    mediator_model: ModelFormula
    mediator_pooled: bool = True
    censoring_model: Optional[ModelFormula] = None
    exposure_censoring_model: ModelFormula = ModelFormula(terms=(EXPOSURE,))
    history_depth: Optional[int] = None
    baseline_terms: Optional[Tuple[str, ...]] = None
    analysis: AnalysisSpec = AnalysisSpec()

    @property
    def P(self) -> int:
        return self.variables.exposure_levels

    @property
    def depth(self) -> int:
        return self.schedule.K if self.history_depth is None else self.history_depth

    @property
    def baseline_covariates(self) -> Tuple[str, ...]:
        if self.baseline_terms is None:
            return self.variables.baseline_names
        return self.baseline_terms

    def with_analysis(self, **changes) -> 'AnalysisConfig':
        """返回替换了 analysis 部分字段的新配置"""
        return replace(self, analysis=replace(self.analysis, **changes))

    def to_dict(self) -> Dict[str, Any]:
        roles = self.variables.roles
        data: Dict[str, Any] = {
            'visit_times': list(self.schedule.visit_times),
            'exposure_levels': self.variables.exposure_levels,
            'mediator_levels': self.variables.mediator_levels,
            'columns': {
                'id': roles.id,
                'time': roles.time,
                'status': roles.status,
                'exposure': roles.exposure,
                'mediator': roles.mediator,
                'confounders': list(roles.confounders),
                'baseline': list(roles.baseline),
            },
            'treatment_model': self.treatment_model.to_dict(),
            'mediator_model': {**self.mediator_model.to_dict(), 'pooled': self.mediator_pooled},
            'censoring_model': self.censoring_model.to_dict() if self.censoring_model else None,
            'exposure_censoring_model': self.exposure_censoring_model.to_dict(),
            'history_depth': self.history_depth,
            'baseline_terms': list(self.baseline_terms) if self.baseline_terms is not None else None,
            'analysis': self.analysis.to_dict(),
        }
        return data


def _require(data: Mapping[str, Any], key: str, path: str = "") -> Any:
    if not isinstance(data, Mapping) or key not in data:
        raise MissingConfigKey(f"{path}{key}")
    return data[key]


def _int(value: Any, key: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise InvalidConfigValue(f"{key} 必须是 >= {minimum} 的整数: {value!r}")
    return value


def _enum(enum_type, value: Any, key: str):
    try:
        return enum_type(value)
    except ValueError:
        choices = ", ".join(e.value for e in enum_type)
        raise InvalidConfigValue(f"{key} 取值无效: {value!r} (可选: {choices})")


def _parse_analysis(data: Mapping[str, Any], P: int) -> AnalysisSpec:
    spec = AnalysisSpec()
    if not isinstance(data, Mapping):
        raise InvalidConfigValue("analysis 必须是对象")

    causes = tuple(data.get('causes', spec.causes))
    for cause in causes:
        if cause not in (EventStatus.MAIN_EVENT, EventStatus.COMPETING_EVENT):
            raise InvalidConfigValue(f"analysis.causes 只能包含 1 或 2: {cause!r}")
    if not causes:
        raise InvalidConfigValue("analysis.causes 不能为空")

    contrasts = []
    for pair in data.get('contrasts', [list(c) for c in spec.contrasts]):
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2
                and all(isinstance(v, int) and 0 <= v < P for v in pair)):
            raise InvalidConfigValue(f"analysis.contrasts 的每一项必须是 [a, a*]，取值 0..{P - 1}: {pair!r}")
        contrasts.append((int(pair[0]), int(pair[1])))

    truncate = data.get('truncate_pct', spec.truncate_pct)
    if truncate is not None and not (isinstance(truncate, (int, float)) and 0 < truncate < 50):
        raise InvalidConfigValue(f"analysis.truncate_pct 必须在 (0, 50) 之间: {truncate!r}")

    reference = data.get('baseline_reference', {})
    if not isinstance(reference, Mapping):
        raise InvalidConfigValue("analysis.baseline_reference 必须是对象")

    return AnalysisSpec(
        model_kind=_enum(ModelKind, data.get('model', spec.model_kind.value), 'analysis.model'),
        causes=tuple(int(c) for c in causes),
        censoring_mode=_enum(CensoringMode, data.get('censoring', spec.censoring_mode.value),
                             'analysis.censoring'),
        contrasts=tuple(contrasts),
        bootstrap_replicates=_int(data.get('bootstrap', spec.bootstrap_replicates), 'analysis.bootstrap', 0),
        seed=_int(data.get('seed', spec.seed), 'analysis.seed', 0),
        truncate_pct=float(truncate) if truncate is not None else None,
        baseline_interaction=bool(data.get('baseline_interaction', False)),
        baseline_reference={str(k): float(v) for k, v in reference.items()},
    )


def parse_config(data: Mapping[str, Any]) -> AnalysisConfig:
    """
    解析配置字典

    Args:
        data: JSON 解码后的配置

    Returns:
        分析配置

    Raises:
        MissingConfigKey: 缺少必需键
        InvalidConfigValue: 取值非法
    """
    if not isinstance(data, Mapping):
        raise InvalidConfigValue("配置顶层必须是对象")

    schedule = VisitSchedule(tuple(_require(data, 'visit_times')))
    P = _int(_require(data, 'exposure_levels'), 'exposure_levels', 2)
    levels = _int(_require(data, 'mediator_levels'), 'mediator_levels', 2)

    columns = _require(data, 'columns')
    roles = ColumnRoles(
        id=_require(columns, 'id', 'columns.'),
        time=_require(columns, 'time', 'columns.'),
        status=_require(columns, 'status', 'columns.'),
        exposure=_require(columns, 'exposure', 'columns.'),
        mediator=_require(columns, 'mediator', 'columns.'),
        confounders=tuple(columns.get('confounders', [])),
        baseline=tuple(columns.get('baseline', [])),
    )
    variables = VariableSpec(roles=roles, exposure_levels=P, mediator_levels=levels)

    mediator_data = _require(data, 'mediator_model')
    censoring = data.get('censoring_model')
    depth = data.get('history_depth')
    if depth is not None:
        depth = _int(depth, 'history_depth', 1)
        if depth > schedule.K:
            raise InvalidConfigValue(f"history_depth 不能超过访视次数 {schedule.K}")
    baseline_terms = data.get('baseline_terms')

    return AnalysisConfig(
        schedule=schedule,
        variables=variables,
        treatment_model=ModelFormula.from_dict(_require(data, 'treatment_model'), 'treatment_model'),
        mediator_model=ModelFormula.from_dict(mediator_data, 'mediator_model'),
        mediator_pooled=bool(mediator_data.get('pooled', True)),
        censoring_model=ModelFormula.from_dict(censoring, 'censoring_model') if censoring is not None else None,
        exposure_censoring_model=ModelFormula.from_dict(
            data.get('exposure_censoring_model', {'terms': [EXPOSURE]}), 'exposure_censoring_model'),
        history_depth=depth,
        baseline_terms=tuple(baseline_terms) if baseline_terms is not None else None,
        analysis=_parse_analysis(data.get('analysis', {}), P),
    )


def load_config(path: str) -> AnalysisConfig:
    """
    读取 JSON 分析配置

    Args:
        path: 配置文件路径

    Returns:
        分析配置
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"无法读取配置文件 {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件不是合法的 JSON: {e}")
    return parse_config(data)


def _long_names(config: AnalysisConfig) -> List[str]:
    names = [EXPOSURE] + mediator_columns(config.depth)
    for conf in config.variables.confounders:
        names += confounder_columns(conf, config.depth)
    return names + list(config.variables.baseline_names)


def validate_config_against(config: AnalysisConfig, dataset: Dataset) -> List[Finding]:
    """
    检查配置与数据集是否一致

    暴露/中介水平数需覆盖数据中的取值，模型公式只能引用存在的列。

    Returns:
        校验结果列表 (subject_id 为 "config")
    """
    findings: List[Finding] = []
    variables = config.variables
    if dataset.variables != variables or dataset.schedule != config.schedule:
        findings.append(Finding("config", "columns", "dataset declared with a different variable layout"))

    observed = {s.exposure for s in dataset.subjects}
    if any(not 0 <= a < variables.exposure_levels for a in observed):
        findings.append(Finding("config", "exposure_levels", "exposure out of range"))

    subject_terms = set(variables.baseline_names)
    long_terms = set(_long_names(config))
    checks = [
        ('treatment_model', config.treatment_model, subject_terms),
        ('mediator_model', config.mediator_model, long_terms | {VISIT_TIME}),
        ('exposure_censoring_model', config.exposure_censoring_model, long_terms),
    ]
    if config.censoring_model is not None:
        checks.append(('censoring_model', config.censoring_model, long_terms))
    for key, formula, allowed in checks:
        for name in formula.variables:
            if name not in allowed:
                findings.append(Finding("config", key, f"unknown term {name}"))
    if EXPOSURE in config.treatment_model.variables:
        findings.append(Finding("config", "treatment_model", f"term {EXPOSURE} is the response"))
    if config.mediator_model.uses(mediator_columns(1)[0]):
        findings.append(Finding("config", "mediator_model", "current mediator is the response"))

    for name in config.baseline_covariates:
        if name not in variables.baseline_names:
            findings.append(Finding("config", "baseline_terms", f"unknown term {name}"))
    for name in config.analysis.baseline_reference:
        if name not in config.baseline_covariates:
            findings.append(Finding("config", "analysis.baseline_reference", f"unknown term {name}"))
    return findings
