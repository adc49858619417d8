"""
合成队列与真值 oracle

离散时间数据生成过程: L0 -> A -> (L1 -> M1) -> ... -> (LK -> MK)，事件与删失都落在访视网格上。
每个分类分布用相邻类别 logit 参数化: logit_c = intercepts[c-1] + c · lp (c = 1..levels-1)，
lp 为系数与输入变量的线性组合；也可以用 probs 直接给出固定概率表。

第 k 个区间 (t_k, t_{k+1}] 的病因别离散风险 h_j = base_j[k] · exp(lp)，lp 使用截至第 k 次访视的
最后一次测量 (第 0 个区间时为 0)。事件发生在区间右端点，最后一个区间的右端点为 study_end。
删失只发生在访视时刻 t_k (k >= 1)，先于该次访视的测量。

oracle 沿时间向前枚举全部 (l0, U_l, U_m, L_k, M_k) 路径: 混杂在暴露 a 下演化，中介在 a* 下演化，
事件风险在 a 下计算，得到反事实病因别风险 λ^j_{a,a*}(k)。
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from .config import _require
from .dataset import ColumnRoles, Dataset, EventStatus, SubjectRecord, VariableSpec, VisitSchedule
from .errors import ConfigError, InvalidConfigValue, NonProportionalTruth, StateSpaceTooLarge

logger = logging.getLogger(__name__)

CONFOUNDER = "L"
MEDIATOR_PREFIX = "m"
BASELINE_COLUMN = ColumnRoles.confounder_column(CONFOUNDER, 0)
MAX_STATES = 1_000_000
PROBABILITY_TOL = 1e-9

EXPOSURE_INPUTS = ('l0',)
CONFOUNDER_INPUTS = ('a', 'l_prev', 'm_prev', 'l0', 'u_l')
MEDIATOR_INPUTS = ('a', 'm_prev', 'l', 'l0', 'u_m')
HAZARD_INPUTS = ('a', 'm', 'l', 'l0', 'u_l', 'u_m')
CENSORING_INPUTS = ('a', 'l', 'm', 'l0')
CAUSES = (int(EventStatus.MAIN_EVENT), int(EventStatus.COMPETING_EVENT))


class CensoringMechanism(str, Enum):
    NONE = "none"
    EXPOSURE_ONLY = "exposure_only"
    HISTORY_DEPENDENT = "history_dependent"


def linear_predictor(coefficients: Mapping[str, float], inputs: Mapping[str, np.ndarray], n: int) -> np.ndarray:
    lp = np.zeros(n)
    for name, beta in coefficients.items():
        lp += beta * np.asarray(inputs[name], dtype=float)
    return lp


@dataclass(frozen=True)
class CategoricalLaw:
    """分类分布: 相邻类别 logit，或固定概率表 probs"""
    intercepts: Tuple[float, ...] = ()
    coefficients: Mapping[str, float] = field(default_factory=dict)
    probs: Optional[Tuple[float, ...]] = None

    @property
    def levels(self) -> int:
        return len(self.probs) if self.probs is not None else len(self.intercepts) + 1

    def probabilities(self, inputs: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        """n × levels 概率矩阵"""
        if self.probs is not None:
            return np.tile(np.asarray(self.probs, dtype=float), (n, 1))
        lp = linear_predictor(self.coefficients, inputs, n)
        logits = np.zeros((n, self.levels))
        logits[:, 1:] = np.asarray(self.intercepts) + lp[:, None] * np.arange(1, self.levels)
        return softmax(logits, axis=1)


@dataclass(frozen=True)
class HazardLaw:
    """病因别离散风险，base 为每个区间 (共 K+1 个) 的基线风险"""
    base: Tuple[float, ...]
    coefficients: Mapping[str, float] = field(default_factory=dict)

    def hazard(self, k: int, inputs: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        if self.base[k] == 0:
            return np.zeros(n)
        return self.base[k] * np.exp(linear_predictor(self.coefficients, inputs, n))


@dataclass(frozen=True)
class CensoringLaw:
    """访视时刻 t_k 的删失概率，base 为每次访视 (共 K 个) 的基线概率"""
    mechanism: CensoringMechanism = CensoringMechanism.NONE
    base: Tuple[float, ...] = ()
    coefficients: Mapping[str, float] = field(default_factory=dict)

    def probability(self, k: int, inputs: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        if self.mechanism is CensoringMechanism.NONE or self.base[k - 1] == 0:
            return np.zeros(n)
        coefficients = self.coefficients
        if self.mechanism is CensoringMechanism.EXPOSURE_ONLY:
            coefficients = {name: beta for name, beta in coefficients.items() if name == 'a'}
        p = self.base[k - 1] * np.exp(linear_predictor(coefficients, inputs, n))
        if np.any(p > 1):
            raise InvalidConfigValue(f"第 {k} 次访视的删失概率超过 1")
        return p


@dataclass(frozen=True)
class DgpConfig:
    """离散时间数据生成过程"""
    schedule: VisitSchedule
    study_end: float
    baseline_support: Tuple[float, ...]
    baseline_probs: Tuple[float, ...]
    exposure: CategoricalLaw
    confounder: CategoricalLaw
    mediator: CategoricalLaw
    hazards: Mapping[int, HazardLaw]
    censoring: CensoringLaw = field(default_factory=CensoringLaw)
    u_l: float = 0.0
    u_m: float = 0.0

    @property
    def K(self) -> int:
        return self.schedule.K

    @property
    def interval_ends(self) -> Tuple[float, ...]:
        """区间 k 的右端点 t_{k+1}，k = 0..K"""
        return self.schedule.visit_times + (self.study_end,)

    @property
    def variables(self) -> VariableSpec:
        roles = ColumnRoles(mediator=MEDIATOR_PREFIX, confounders=(CONFOUNDER,))
        return VariableSpec(roles=roles, exposure_levels=self.exposure.levels,
                            mediator_levels=self.mediator.levels)

    def event_hazards(self, k: int, inputs: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        """区间 k 的离散风险 (n × 2，列依次为病因 1、2)"""
        hazards = np.zeros((n, len(CAUSES)))
        for j, cause in enumerate(CAUSES):
            if cause in self.hazards:
                hazards[:, j] = self.hazards[cause].hazard(k, inputs, n)
        if np.any(hazards.sum(axis=1) >= 1):
            raise InvalidConfigValue(f"第 {k} 个区间的总离散风险不小于 1")
        return hazards


# 解析

def _floats(value: Any, key: str) -> Tuple[float, ...]:
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, (int, float)) for v in value):
        raise InvalidConfigValue(f"{key} 必须是数值列表: {value!r}")
    return tuple(float(v) for v in value)


def _probability_table(value: Any, key: str) -> Tuple[float, ...]:
    probs = _floats(value, key)
    if not probs or min(probs) < 0 or abs(sum(probs) - 1) > PROBABILITY_TOL:
        raise InvalidConfigValue(f"{key} 不是合法的概率表: {list(probs)}")
    return probs


def _coefficients(data: Mapping[str, Any], key: str, inputs: Sequence[str]) -> Dict[str, float]:
    coefficients = data.get('coefficients', {})
    if not isinstance(coefficients, Mapping):
        raise InvalidConfigValue(f"{key}.coefficients 必须是对象")
    for name in coefficients:
        if name not in inputs:
            raise InvalidConfigValue(f"{key}.coefficients 不支持变量 {name} (可选: {', '.join(inputs)})")
    return {name: float(beta) for name, beta in coefficients.items()}


def _law(data: Mapping[str, Any], key: str, inputs: Sequence[str]) -> CategoricalLaw:
    law = _require(data, key)
    if 'probs' in law:
        return CategoricalLaw(probs=_probability_table(law['probs'], f"{key}.probs"))
    intercepts = _floats(_require(law, 'intercepts', f"{key}."), f"{key}.intercepts")
    if not intercepts:
        raise InvalidConfigValue(f"{key}.intercepts 至少需要一项")
    return CategoricalLaw(intercepts, _coefficients(law, key, inputs))


def _fraction(value: Any, key: str) -> float:
    if not isinstance(value, (int, float)) or not 0 <= value <= 1:
        raise InvalidConfigValue(f"{key} 必须在 [0, 1] 之间: {value!r}")
    return float(value)


def parse_dgp(data: Mapping[str, Any]) -> DgpConfig:
    """
    解析 DGP 配置字典

    Args:
        data: JSON 解码后的 DGP 配置

    Returns:
        DgpConfig

    Raises:
        MissingConfigKey: 缺少必需键
        InvalidConfigValue: 概率表无效或取值越界
    """
    if not isinstance(data, Mapping):
        raise InvalidConfigValue("DGP 配置顶层必须是对象")
    schedule = VisitSchedule(tuple(_require(data, 'visit_times')))
    study_end = float(_require(data, 'study_end'))
    if study_end <= schedule.visit_times[-1]:
        raise InvalidConfigValue(f"study_end 必须晚于最后一次访视: {study_end}")

    baseline = _require(data, 'baseline')
    support = _floats(_require(baseline, 'support', 'baseline.'), 'baseline.support')
    probs = _probability_table(_require(baseline, 'probs', 'baseline.'), 'baseline.probs')
    if len(support) != len(probs):
        raise InvalidConfigValue("baseline.support 与 baseline.probs 长度不一致")

    latent = data.get('latent', {})
    hazards = {}
    for cause, law in _require(data, 'hazards').items():
        if int(cause) not in CAUSES:
            raise InvalidConfigValue(f"hazards 的病因只能是 1 或 2: {cause!r}")
        key = f"hazards.{cause}"
        base = _floats(_require(law, 'base', f"{key}."), f"{key}.base")
        if len(base) != schedule.K + 1 or min(base) < 0:
            raise InvalidConfigValue(f"{key}.base 需要 {schedule.K + 1} 个非负基线风险")
        hazards[int(cause)] = HazardLaw(base, _coefficients(law, key, HAZARD_INPUTS))

    censoring = CensoringLaw()
    if 'censoring' in data:
        section = data['censoring']
        try:
            mechanism = CensoringMechanism(_require(section, 'mechanism', 'censoring.'))
        except ValueError:
            raise InvalidConfigValue(f"censoring.mechanism 取值无效: {section['mechanism']!r}")
        base = ()
        if mechanism is not CensoringMechanism.NONE:
            base = _floats(_require(section, 'base', 'censoring.'), 'censoring.base')
            if len(base) != schedule.K or min(base) < 0:
                raise InvalidConfigValue(f"censoring.base 需要 {schedule.K} 个非负基线概率")
        censoring = CensoringLaw(mechanism, base, _coefficients(section, 'censoring', CENSORING_INPUTS))

    return DgpConfig(
        schedule=schedule,
        study_end=study_end,
        baseline_support=support,
        baseline_probs=probs,
        exposure=_law(data, 'exposure', EXPOSURE_INPUTS),
        confounder=_law(data, 'confounder', CONFOUNDER_INPUTS),
        mediator=_law(data, 'mediator', MEDIATOR_INPUTS),
        hazards=hazards,
        censoring=censoring,
        u_l=_fraction(latent.get('u_l', 0.0), 'latent.u_l'),
        u_m=_fraction(latent.get('u_m', 0.0), 'latent.u_m'),
    )


def load_dgp(path: str) -> DgpConfig:
    """读取 JSON 格式的 DGP 配置"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"无法读取 DGP 配置 {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"DGP 配置不是合法的 JSON: {e}")
    return parse_dgp(data)


# 抽样

# 每个受试者的均匀数列布局: l0, u_l, u_m, a，然后每个区间 k 依次为删失、L_k、M_k、事件
_BASELINE_DRAWS = 4
_STEP_DRAWS = 4


def _uniforms(seed: int, n: int, K: int) -> np.ndarray:
    """
    每个受试者独立的子流 default_rng([seed, i])

    受试者 i 的数据只取决于 (seed, i)，与 n 无关。
    """
    width = _BASELINE_DRAWS + _STEP_DRAWS * (K + 1)
    return np.vstack([np.random.default_rng([seed, i]).random(width) for i in range(n)])


def _column(k: int, offset: int) -> int:
    return _BASELINE_DRAWS + _STEP_DRAWS * k + offset


def _draw(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """按行抽取类别下标"""
    index = (u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
    return np.minimum(index, probs.shape[1] - 1)


def generate(config: DgpConfig, n: int, seed: int) -> Dataset:
    """
    从 DGP 抽取 n 个独立受试者

    按拓扑顺序 L0 -> A -> (删失 -> L_k -> M_k -> 区间 k 的事件) 逐区间抽样，
    每个受试者使用自己的随机子流，前 m 个受试者不随 n 改变。

    Args:
        config: DGP 配置
        n: 受试者数 (>= 1)
        seed: 随机种子

    Returns:
        短格式数据集 (混杂列 L_0..L_K，中介列 m1..mK)
    """
    if n < 1:
        raise InvalidConfigValue(f"受试者数必须 >= 1: {n}")
    U = _uniforms(seed, n, config.K)
    K = config.K
    support = np.asarray(config.baseline_support)

    l0 = support[_draw(U[:, 0], np.tile(config.baseline_probs, (n, 1)))]
    u_l = (U[:, 1] < config.u_l).astype(float)
    u_m = (U[:, 2] < config.u_m).astype(float)
    a = _draw(U[:, 3], config.exposure.probabilities({'l0': l0}, n)).astype(float)

    L = np.full((n, K), np.nan)
    M = np.full((n, K), np.nan)
    time = np.full(n, config.study_end)
    status = np.zeros(n, dtype=int)
    active = np.ones(n, dtype=bool)
    l_last = np.zeros(n)
    m_last = np.zeros(n)

    for k in range(K + 1):
        if k >= 1:
            p = config.censoring.probability(k, {'a': a, 'l': l_last, 'm': m_last, 'l0': l0}, n)
            censored = active & (U[:, _column(k, 0)] < p)
            time[censored] = config.schedule.time_of(k)
            active &= ~censored

            inputs = {'a': a, 'l_prev': l_last, 'm_prev': m_last, 'l0': l0, 'u_l': u_l}
            l_last = _draw(U[:, _column(k, 1)], config.confounder.probabilities(inputs, n)).astype(float)
            inputs = {'a': a, 'm_prev': m_last, 'l': l_last, 'l0': l0, 'u_m': u_m}
            m_last = _draw(U[:, _column(k, 2)], config.mediator.probabilities(inputs, n)).astype(float)
            L[active, k - 1] = l_last[active]
            M[active, k - 1] = m_last[active]

        inputs = {'a': a, 'm': m_last, 'l': l_last, 'l0': l0, 'u_l': u_l, 'u_m': u_m}
        cumulative = np.cumsum(config.event_hazards(k, inputs, n), axis=1)
        u = U[:, _column(k, 3)]
        cause = np.where(u < cumulative[:, 0], CAUSES[0], np.where(u < cumulative[:, 1], CAUSES[1], 0))
        failed = active & (cause > 0)
        time[failed] = config.interval_ends[k]
        status[failed] = cause[failed]
        active &= ~failed

    subjects = tuple(
        SubjectRecord(
            id=str(i + 1),
            exposure=int(a[i]),
            baseline_covariates={BASELINE_COLUMN: float(l0[i])},
            followup_time=float(time[i]),
            status=EventStatus(int(status[i])),
            mediator_by_visit=tuple(None if np.isnan(v) else int(v) for v in M[i]),
            confounders_by_visit=tuple(None if np.isnan(v) else {CONFOUNDER: int(v)} for v in L[i]),
        )
        for i in range(n)
    )
    logger.info("生成 %d 个受试者: 病因 1 %d 例，病因 2 %d 例，删失 %d 例", n,
                int(np.sum(status == 1)), int(np.sum(status == 2)), int(np.sum(status == 0)))
    return Dataset(subjects=subjects, schedule=config.schedule, variables=config.variables)


# oracle

@dataclass(frozen=True)
class OracleHazards:
    """反事实病因别离散风险，hazards[cause][k] 对应区间 (t_k, t_{k+1}]"""
    a: int
    a_star: int
    interval_ends: Tuple[float, ...]
    hazards: Mapping[int, np.ndarray]
    at_risk: np.ndarray

    def to_dict(self) -> Dict[str, object]:
        return {
            'a': self.a,
            'a_star': self.a_star,
            'interval_ends': list(self.interval_ends),
            'hazards': {str(c): h.tolist() for c, h in sorted(self.hazards.items())},
            'at_risk': self.at_risk.tolist(),
        }


@dataclass(frozen=True)
class TrueEffects:
    """病因 cause 在对比 a -> a* 下的真值风险比"""
    cause: int
    a: int
    a_star: int
    hr_te: float
    hr_de: float
    hr_ie: float

    def to_dict(self) -> Dict[str, object]:
        return {'cause': self.cause, 'a': self.a, 'a_star': self.a_star,
                'hr_te': self.hr_te, 'hr_de': self.hr_de, 'hr_ie': self.hr_ie}


def _latent_levels(prevalence: float) -> int:
    return 2 if 0 < prevalence < 1 else 1


def path_count(config: DgpConfig) -> int:
    """oracle 需要枚举的完整路径数"""
    per_visit = config.confounder.levels * config.mediator.levels
    return (len(config.baseline_support) * _latent_levels(config.u_l) * _latent_levels(config.u_m)
            * per_visit ** config.K)


def _expand(state: Dict[str, np.ndarray], mass: np.ndarray, name: str, probs: np.ndarray):
    """每条路径按 name 的取值展开，丢弃概率为 0 的路径"""
    n, levels = probs.shape
    expanded = {key: np.repeat(values, levels) for key, values in state.items()}
    expanded[name] = np.tile(np.arange(levels, dtype=float), n)
    mass = np.repeat(mass, levels) * probs.ravel()
    keep = mass > 0
    return {key: values[keep] for key, values in expanded.items()}, mass[keep]


def _latent_probs(prevalence: float, n: int) -> np.ndarray:
    return np.tile([1.0 - prevalence, prevalence], (n, 1))


def oracle_counterfactual_hazards(
    config: DgpConfig,
    a: int,
    a_star: int,
    max_states: int = MAX_STATES,
) -> OracleHazards:
    """
    枚举计算反事实病因别风险 λ^j_{a,a*}(k)

    λ^j(k) = Σ 路径概率 · h_j / Σ 路径概率，路径概率为在 (a, a*) 下存活到区间 k 的联合概率。

    Args:
        config: DGP 配置
        a: 直接路径上的暴露 (混杂与事件)
        a_star: 中介路径上的暴露
        max_states: 允许枚举的最大路径数

    Returns:
        每个病因、每个区间的反事实风险

    Raises:
        StateSpaceTooLarge: 路径数超过 max_states
    """
    levels = config.exposure.levels
    if not (0 <= a < levels and 0 <= a_star < levels):
        raise InvalidConfigValue(f"暴露取值超出 0..{levels - 1}: ({a}, {a_star})")
    total = path_count(config)
    if total > max_states:
        raise StateSpaceTooLarge(f"需要枚举 {total} 条路径，超过上限 {max_states}")

    state = {'l0': np.asarray(config.baseline_support, dtype=float)}
    mass = np.asarray(config.baseline_probs, dtype=float)
    keep = mass > 0
    state, mass = {'l0': state['l0'][keep]}, mass[keep]
    state, mass = _expand(state, mass, 'u_l', _latent_probs(config.u_l, len(mass)))
    state, mass = _expand(state, mass, 'u_m', _latent_probs(config.u_m, len(mass)))
    state['l'] = np.zeros(len(mass))
    state['m'] = np.zeros(len(mass))

    hazards = {cause: np.zeros(config.K + 1) for cause in config.hazards}
    at_risk = np.zeros(config.K + 1)
    for k in range(config.K + 1):
        if k >= 1:
            n = len(mass)
            inputs = {'a': np.full(n, float(a)), 'l_prev': state['l'], 'm_prev': state['m'],
                      'l0': state['l0'], 'u_l': state['u_l']}
            state, mass = _expand(state, mass, 'l', config.confounder.probabilities(inputs, n))
            n = len(mass)
            inputs = {'a': np.full(n, float(a_star)), 'm_prev': state['m'], 'l': state['l'],
                      'l0': state['l0'], 'u_m': state['u_m']}
            state, mass = _expand(state, mass, 'm', config.mediator.probabilities(inputs, n))

        n = len(mass)
        inputs = {'a': np.full(n, float(a)), 'm': state['m'], 'l': state['l'],
                  'l0': state['l0'], 'u_l': state['u_l'], 'u_m': state['u_m']}
        h = config.event_hazards(k, inputs, n)
        risk = mass.sum()
        at_risk[k] = risk
        for j, cause in enumerate(CAUSES):
            if cause in hazards and risk > 0:
                hazards[cause][k] = float(mass @ h[:, j]) / risk
        mass = mass * (1.0 - h.sum(axis=1))

    logger.debug("oracle (a=%d, a*=%d): 枚举 %d 条路径", a, a_star, len(mass))
    return OracleHazards(a, a_star, config.interval_ends, hazards, at_risk)


def oracle_true_hrs(
    config: DgpConfig,
    contrasts: Sequence[Tuple[int, int]],
    tolerance: float = 1e-9,
    max_states: int = MAX_STATES,
) -> List[TrueEffects]:
    """
    由 oracle 风险计算每个对比、每个病因的真值 HR_TE / HR_DE / HR_IE

    HR_TE = λ_{a*,a*}/λ_{a,a}，HR_DE = λ_{a*,a*}/λ_{a,a*}，HR_IE = λ_{a,a*}/λ_{a,a}。
    三个风险都为 0 的区间跳过；其余区间上的对数风险比极差必须不超过 tolerance。

    Raises:
        NonProportionalTruth: 风险比随区间变化，或只有部分反事实风险为 0
    """
    cache: Dict[Tuple[int, int], OracleHazards] = {}

    def hazards(x: int, y: int) -> OracleHazards:
        if (x, y) not in cache:
            cache[(x, y)] = oracle_counterfactual_hazards(config, x, y, max_states)
        return cache[(x, y)]

    results = []
    for a, a_star in contrasts:
        for cause in sorted(config.hazards):
            base = hazards(a, a).hazards[cause]
            cross = hazards(a, a_star).hazards[cause]
            target = hazards(a_star, a_star).hazards[cause]
            informative = (base > 0) | (cross > 0) | (target > 0)
            if not informative.any():
                logger.warning("病因 %d 在所有区间的反事实风险都为 0，跳过", cause)
                continue
            if not ((base > 0) & (cross > 0) & (target > 0))[informative].all():
                raise NonProportionalTruth(f"病因 {cause} 的部分反事实风险为 0，风险比无定义")

            log_ie = np.log(cross[informative]) - np.log(base[informative])
            log_de = np.log(target[informative]) - np.log(cross[informative])
            for name, values in (('HR_IE', log_ie), ('HR_DE', log_de)):
                spread = float(np.ptp(values))
                if spread > tolerance:
                    raise NonProportionalTruth(
                        f"病因 {cause} 在对比 ({a}, {a_star}) 下的 {name} 随区间变化 (对数极差 {spread:.3g})")
            results.append(TrueEffects(
                cause, a, a_star,
                hr_te=float(np.exp(log_de[0] + log_ie[0])),
                hr_de=float(np.exp(log_de[0])),
                hr_ie=float(np.exp(log_ie[0])),
            ))
    return results
