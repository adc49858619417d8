"""
加权病因别比例风险模型

计数过程数据 (start, stop] 上的加权偏似然 Newton-Raphson 求解 (Breslow 结处理)，
Breslow 基线累积风险，以及删失风险模型的乘积极限生存函数。
风险集约定: 行在 t 时刻处于风险中当且仅当 start < t <= stop。
"""

import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from ..errors import InvalidConfigValue, MonotoneLikelihood, NoEventsForCause
from .newton import check_rank, maximize

logger = logging.getLogger(__name__)

# 乘积极限每个因子的下界
SURVIVAL_FACTOR_FLOOR = 1e-6
# 逐行展开 (行, 跳跃点) 对时每块的最大对数
PAIR_CHUNK = 2_000_000


@dataclass(frozen=True)
class SurvivalData:
    """
    计数过程格式的生存数据

    事件: status == cause 且为受试者的最后一行 (last)。
    """
    start: np.ndarray
    stop: np.ndarray
    status: np.ndarray
    last: np.ndarray
    X: np.ndarray
    weights: np.ndarray
    column_names: Tuple[str, ...] = ()

    def __post_init__(self):
        start = np.asarray(self.start, dtype=float)
        stop = np.asarray(self.stop, dtype=float)
        n = len(start)
        X = np.asarray(self.X, dtype=float).reshape(n, -1)
        weights = np.asarray(self.weights, dtype=float)
        if not (len(stop) == len(self.status) == len(self.last) == len(weights) == n):
            raise InvalidConfigValue("生存数据各列长度不一致")
        if np.any(start >= stop):
            raise InvalidConfigValue("计数过程行必须满足 start < stop")
        if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
            raise InvalidConfigValue("个体权重必须为正的有限值")
        if not np.all(np.isfinite(X)):
            raise InvalidConfigValue("协变量包含非有限值")
        names = tuple(self.column_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        object.__setattr__(self, 'start', start)
        object.__setattr__(self, 'stop', stop)
        object.__setattr__(self, 'status', np.asarray(self.status, dtype=int))
        object.__setattr__(self, 'last', np.asarray(self.last, dtype=bool))
        object.__setattr__(self, 'X', X)
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'column_names', names)

    @property
    def n(self) -> int:
        return len(self.start)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def events(self, cause: int) -> np.ndarray:
        return (self.status == cause) & self.last


@dataclass(frozen=True)
class CoxFit:
    """病因别 Cox 模型拟合结果 (cause 以外的状态视为删失)"""
    cause: int
    coefficients: np.ndarray
    column_names: Tuple[str, ...]
    converged: bool
    log_partial_likelihood: float
    n_iterations: int
    n_events: int
    events_first: bool = False

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if not self.coefficients.size:
            return np.zeros(X.shape[0])
        return X @ self.coefficients

    def to_dict(self) -> Dict[str, object]:
        return {
            'cause': self.cause,
            'coefficients': {n: float(v) for n, v in zip(self.column_names, self.coefficients)},
            'converged': self.converged,
            'log_partial_likelihood': float(self.log_partial_likelihood),
            'iterations': self.n_iterations,
            'events': self.n_events,
        }


@dataclass(frozen=True)
class BaselineHazard:
    """Breslow 基线累积风险的跳跃点与增量"""
    cause: int
    jump_times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=float)
        increments = np.asarray(self.increments, dtype=float)
        if len(times) != len(increments):
            raise InvalidConfigValue("跳跃点与增量长度不一致")
        if np.any(np.diff(times) <= 0) or np.any(increments < 0):
            raise InvalidConfigValue("跳跃点必须严格递增且增量非负")
        object.__setattr__(self, 'jump_times', times)
        object.__setattr__(self, 'increments', increments)

    def cumulative(self, t: float) -> float:
        """Λ0(t) = Σ_{s <= t} dΛ0(s)"""
        return float(self.increments[self.jump_times <= t].sum())

    def to_dict(self) -> Dict[str, object]:
        return {
            'cause': self.cause,
            'times': [float(t) for t in self.jump_times],
            'increments': [float(d) for d in self.increments],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> 'BaselineHazard':
        return cls(int(data['cause']), np.asarray(data['times'], dtype=float),
                   np.asarray(data['increments'], dtype=float))


@dataclass(frozen=True)
class _EventTimes:
    times: np.ndarray          # 不同的事件时间
    weight: np.ndarray         # 每个事件时间的事件权重和 d_w(t)
    weighted_x: np.ndarray     # Σ_events w x


def _event_times(data: SurvivalData, cause: int, X: np.ndarray) -> _EventTimes:
    mask = data.events(cause)
    times, index = np.unique(data.stop[mask], return_inverse=True)
    weight = np.bincount(index, weights=data.weights[mask], minlength=len(times))
    weighted_x = (X[mask] * data.weights[mask][:, None]).sum(axis=0)
    return _EventTimes(times, weight, weighted_x)


def _suffix(values: np.ndarray) -> np.ndarray:
    """沿第 0 轴的后缀和，末尾补一行 0"""
    out = np.zeros((values.shape[0] + 1,) + values.shape[1:])
    out[:-1] = np.cumsum(values[::-1], axis=0)[::-1]
    return out


class _RiskSets:
    """
    事件时间上的风险集加权和 (start < t <= stop)

    events_first 时，其它状态的终点行在其 stop 时刻先于本病因事件离开风险集。
    """

    def __init__(self, data: SurvivalData, times: np.ndarray, cause: int, events_first: bool = False):
        self.stop_order = np.argsort(data.stop, kind='stable')
        self.start_order = np.argsort(data.start, kind='stable')
        self.stop_index = np.searchsorted(data.stop[self.stop_order], times, side='left')
        self.start_index = np.searchsorted(data.start[self.start_order], times, side='left')
        self.n_times = len(times)
        self.leaving = np.zeros(0, dtype=int)
        self.leaving_time = np.zeros(0, dtype=int)
        if events_first and len(times):
            other = np.flatnonzero(data.last & (data.status != cause))
            index = np.minimum(np.searchsorted(times, data.stop[other]), len(times) - 1)
            tied = times[index] == data.stop[other]
            self.leaving, self.leaving_time = other[tied], index[tied]

    def sum(self, values: np.ndarray) -> np.ndarray:
        at_or_after_stop = _suffix(values[self.stop_order])[self.stop_index]
        after_start = _suffix(values[self.start_order])[self.start_index]
        total = at_or_after_stop - after_start
        if len(self.leaving):
            leaving = np.zeros((self.n_times,) + values.shape[1:])
            np.add.at(leaving, self.leaving_time, values[self.leaving])
            total = total - leaving
        return total


def _partial_likelihood_terms(beta, X, data, events, risk, order):
    eta = X @ beta if X.shape[1] else np.zeros(data.n)
    shift = eta.max()
    r = data.weights * np.exp(eta - shift)
    s0 = risk.sum(r)
    if np.any(s0 <= 0):
        return -np.inf, None, None
    case_term = float(beta @ events.weighted_x) if beta.size else 0.0
    ll = case_term - float(np.sum(events.weight * (np.log(s0) + shift)))
    if order == 0:
        return ll, None, None
    s1 = risk.sum(r[:, None] * X)
    mean = s1 / s0[:, None]
    score = events.weighted_x - (events.weight[:, None] * mean).sum(axis=0)
    if order == 1:
        return ll, score, None
    s2 = risk.sum(r[:, None, None] * X[:, :, None] * X[:, None, :])
    second = s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :]
    hess = -(events.weight[:, None, None] * second).sum(axis=0)
    return ll, score, hess


def _centered(data: SurvivalData) -> np.ndarray:
    return data.X - data.X.mean(axis=0) if data.p else data.X


def cox_log_partial_likelihood(beta: Sequence[float], data: SurvivalData, cause: int,
                                events_first: bool = False) -> float:
    """加权 Breslow 对数偏似然"""
    X = _centered(data)
    events = _event_times(data, cause, X)
    ll, _, _ = _partial_likelihood_terms(np.asarray(beta, dtype=float), X, data, events,
                                         _RiskSets(data, events.times, cause, events_first), order=0)
    return ll


def cox_score(beta: Sequence[float], data: SurvivalData, cause: int,
              events_first: bool = False) -> np.ndarray:
    """对数偏似然的解析梯度 (中心化不改变梯度)"""
    X = _centered(data)
    events = _event_times(data, cause, X)
    _, score, _ = _partial_likelihood_terms(np.asarray(beta, dtype=float), X, data, events,
                                            _RiskSets(data, events.times, cause, events_first), order=1)
    return score


def fit_weighted_cox(data: SurvivalData, cause: int, events_first: bool = False) -> CoxFit:
    """
    拟合加权病因别 Cox 模型

    求解加权偏似然得分方程: 每个事件时间上，事件的加权协变量减去风险集按
    权重与相对风险加权的协变量均值，总和为 0。

    Args:
        data: 计数过程数据 (含个体权重)
        cause: 作为事件的状态码，其余状态视为删失
        events_first: 结时其它状态的终点先发生 (拟合删失模型时使用)

    Returns:
        拟合结果

    Raises:
        NoEventsForCause: 数据中没有该病因的事件
        MonotoneLikelihood: 系数发散
        RankDeficient: 协变量列秩不足
        NonConvergence: 迭代未收敛
    """
    n_events = int(data.events(cause).sum())
    if n_events == 0:
        raise NoEventsForCause(f"没有状态码为 {cause} 的事件")

    X = _centered(data)
    events = _event_times(data, cause, X)
    risk = _RiskSets(data, events.times, cause, events_first)

    if data.p == 0:
        ll, _, _ = _partial_likelihood_terms(np.zeros(0), X, data, events, risk, order=0)
        return CoxFit(cause, np.zeros(0), (), True, ll, 0, n_events, events_first)

    check_rank(X)
    result = maximize(
        objective=lambda b: _partial_likelihood_terms(b, X, data, events, risk, order=0)[0],
        derivatives=lambda b: _partial_likelihood_terms(b, X, data, events, risk, order=2)[1:],
        theta0=np.zeros(data.p),
        divergence=MonotoneLikelihood,
    )
    logger.debug("Cox 拟合 (cause=%d): %d 次迭代, 收敛=%s", cause, result.n_iterations, result.converged)
    return CoxFit(
        cause=cause,
        coefficients=result.theta,
        column_names=data.column_names,
        converged=result.converged,
        log_partial_likelihood=result.log_likelihood,
        n_iterations=result.n_iterations,
        n_events=n_events,
        events_first=events_first,
    )


def breslow_baseline(fit: CoxFit, data: SurvivalData) -> BaselineHazard:
    """
    Breslow 基线累积风险

    事件时间 t 上的增量 = 该病因在 t 的事件权重和 / 风险集上 w·exp(线性预测值) 之和。

    Args:
        fit: Cox 拟合结果
        data: 拟合所用数据

    Returns:
        基线累积风险 (无事件时跳跃点为空)
    """
    mask = data.events(fit.cause)
    times, index = np.unique(data.stop[mask], return_inverse=True)
    if not len(times):
        return BaselineHazard(fit.cause, np.zeros(0), np.zeros(0))
    weight = np.bincount(index, weights=data.weights[mask], minlength=len(times))
    eta = fit.linear_predictor(data.X)
    shift = eta.max()
    s0 = _RiskSets(data, times, fit.cause, fit.events_first).sum(data.weights * np.exp(eta - shift))
    increments = np.exp(np.log(weight) - np.log(s0) - shift)
    return BaselineHazard(fit.cause, times, increments)


def interval_log_survival(
    fit: CoxFit,
    baseline: BaselineHazard,
    data: SurvivalData,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    每行区间上的对数乘积极限因子之和

    对第 r 行，因子为 clip(1 - exp(x_r β) dΛ0(s), 1e-6, 1)，s 为基线跳跃点。

    Args:
        fit: 删失 (或病因) Cox 拟合
        baseline: 对应的基线累积风险
        data: 计数过程数据，协变量列与 fit 一致

    Returns:
        (s ∈ (start, stop] 的对数和, s ∈ (start, stop) 的对数和, 被截断的因子个数)
    """
    jumps = baseline.jump_times
    closed = np.zeros(data.n)
    open_ = np.zeros(data.n)
    if not len(jumps):
        return closed, open_, 0

    risk = np.exp(fit.linear_predictor(data.X))
    lo = np.searchsorted(jumps, data.start, side='right')
    hi = np.searchsorted(jumps, data.stop, side='right')
    counts = hi - lo
    clipped = 0

    rows = np.flatnonzero(counts > 0)
    bounds = np.cumsum(counts[rows])
    start_pos = 0
    while start_pos < len(rows):
        # 按累计对数切块
        base = bounds[start_pos - 1] if start_pos else 0
        end_pos = max(int(np.searchsorted(bounds, base + PAIR_CHUNK, side='right')), start_pos + 1)
        chunk = rows[start_pos:end_pos]
        row_index = np.repeat(chunk, counts[chunk])
        offsets = np.arange(len(row_index)) - np.repeat(np.cumsum(counts[chunk]) - counts[chunk], counts[chunk])
        jump_index = lo[row_index] + offsets
        factor = 1.0 - risk[row_index] * baseline.increments[jump_index]
        clipped += int(np.sum(factor < SURVIVAL_FACTOR_FLOOR))
        log_factor = np.log(np.clip(factor, SURVIVAL_FACTOR_FLOOR, 1.0))
        closed += np.bincount(row_index, weights=log_factor, minlength=data.n)
        strictly_before = jumps[jump_index] < data.stop[row_index]
        open_ += np.bincount(row_index, weights=log_factor * strictly_before, minlength=data.n)
        start_pos = end_pos

    if clipped:
        logger.debug("乘积极限中有 %d 个因子被截断到 %g", clipped, SURVIVAL_FACTOR_FLOOR)
    return closed, open_, clipped


def censoring_survival(
    fit: CoxFit,
    baseline: BaselineHazard,
    path: SurvivalData,
    t: float,
    left_limit: bool = False,
) -> float:
    """
    单个受试者的删失生存概率 (乘积极限)

    Π_{s <= t} [1 - exp(x(s) β) dΛ0C(s)]，x(s) 取 start < s <= stop 的那一行，
    即 ⌊s⌋ 时刻的历史；每个因子截断到 [1e-6, 1]。

    Args:
        fit: 删失模型拟合
        baseline: 删失基线累积风险
        path: 该受试者的计数过程行 (按时间排序)
        t: 评估时刻
        left_limit: 为 True 时只累乘 s < t 的跳跃 (G(t-))

    Returns:
        生存概率
    """
    if t < 0:
        raise InvalidConfigValue("评估时刻必须非负")
    jumps = baseline.jump_times
    keep = jumps < t if left_limit else jumps <= t
    survival = 1.0
    if not np.any(keep):
        return survival
    eta = fit.linear_predictor(path.X)
    for s, d in zip(jumps[keep], baseline.increments[keep]):
        row = int(np.searchsorted(path.stop, s, side='left'))
        row = min(row, path.n - 1)
        factor = 1.0 - np.exp(eta[row]) * d
        survival *= float(np.clip(factor, SURVIVAL_FACTOR_FLOOR, 1.0))
    return survival
