"""
逆概率权重

暴露权重 1/Pr(A=a|L0)，纵向中介权重 Π Pr(M_s|a*, ...)/Pr(M_s|a, ...)，
以及 (稳定化) 删失权重。权重按 ⌊stop⌋ 取值: 长格式第 k 个区间使用截至第 k 次访视的乘积。
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from .config import VISIT_TIME, CensoringMode
from .dataset import TIME_TOL, EventStatus
from .engines.cox import (
    BaselineHazard,
    CoxFit,
    SurvivalData,
    breslow_baseline,
    fit_weighted_cox,
    interval_log_survival,
)
from .engines.design import DesignMatrix, ModelFormula, drop_constant_columns
from .engines.glm import FittedGlm, fit_multinomial, predict_proba
from .errors import DegenerateMediatorProb, DegeneratePropensity, MissingConfigKey, stage
from .reshape import EXPOSURE, HYPOTHETICAL, MEDIATOR, lag_name

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-6
# 行政删失的内部状态码
ADMINISTRATIVE = -1
CURRENT_MEDIATOR = lag_name(MEDIATOR, 0)


@dataclass(frozen=True)
class TreatmentModel:
    """暴露模型 Pr(A | L0)"""
    formula: ModelFormula
    fit: FittedGlm

    def probabilities(self, subjects: pd.DataFrame) -> np.ndarray:
        return predict_proba(self.fit, self.formula.design(subjects))

    def to_dict(self) -> Dict[str, object]:
        return {'formula': self.formula.to_dict(), 'fit': self.fit.to_dict()}


@dataclass(frozen=True)
class MediatorModel:
    """
    中介模型 Pr(M_k | A, M 历史, L 历史, L0)

    pooled 时 fits 只有键 None；否则每个访视 k 一个拟合。
    """
    formula: ModelFormula
    pooled: bool
    fits: Mapping[Optional[int], FittedGlm]

    def probabilities(self, rows: pd.DataFrame, exposure: np.ndarray) -> np.ndarray:
        """
        rows 为 _visit >= 1 的长格式行，exposure 替换 A 后的预测概率 (n × (Q+1))
        """
        design = self.formula.design(rows, overrides={EXPOSURE: exposure})
        if self.pooled:
            return predict_proba(self.fits[None], design)
        n_categories = next(iter(self.fits.values())).n_categories
        probs = np.zeros((len(rows), n_categories))
        visits = rows['_visit'].to_numpy()
        for visit, fit in self.fits.items():
            mask = visits == visit
            if mask.any():
                sub = DesignMatrix(design.values[mask], design.column_names)
                probs[mask] = predict_proba(fit, sub.select(fit.column_names))
        return probs

    def to_dict(self) -> Dict[str, object]:
        return {
            'formula': self.formula.to_dict(),
            'pooled': self.pooled,
            'fits': {('pooled' if k is None else str(k)): f.to_dict() for k, f in self.fits.items()},
        }


@dataclass(frozen=True)
class CensoringHazard:
    """删失 Cox 模型 + Breslow 基线"""
    formula: ModelFormula
    fit: CoxFit
    baseline: BaselineHazard

    def to_dict(self) -> Dict[str, object]:
        return {'formula': self.formula.to_dict(), 'fit': self.fit.to_dict(),
                'baseline': self.baseline.to_dict()}


@dataclass(frozen=True)
class CensoringModel:
    """完整历史模型 (分母) 与仅暴露模型 (稳定化分子)，按模式可缺省"""
    mode: CensoringMode
    history: Optional[CensoringHazard] = None
    exposure: Optional[CensoringHazard] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            'mode': self.mode.value,
            'history': self.history.to_dict() if self.history else None,
            'exposure': self.exposure.to_dict() if self.exposure else None,
        }


@dataclass(frozen=True)
class NuisanceModels:
    treatment: TreatmentModel
    mediator: MediatorModel
    censoring: CensoringModel

    def to_dict(self) -> Dict[str, object]:
        return {
            'treatment': self.treatment.to_dict(),
            'mediator': self.mediator.to_dict(),
            'censoring': self.censoring.to_dict(),
        }


@dataclass(frozen=True)
class ComponentSummary:
    min: float
    max: float
    mean: float

    @classmethod
    def of(cls, values: np.ndarray) -> 'ComponentSummary':
        return cls(float(values.min()), float(values.max()), float(values.mean()))

    def to_dict(self) -> Dict[str, float]:
        return {'min': self.min, 'max': self.max, 'mean': self.mean}


@dataclass(frozen=True)
class WeightDiagnostics:
    """权重诊断: 总权重的范围与均值、有效样本量、截断/裁剪计数及各分量摘要"""
    min: float
    max: float
    mean: float
    effective_sample_size: float
    clipped_censoring_factors: int
    truncated_rows: int
    components: Mapping[str, ComponentSummary] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            'min': self.min,
            'max': self.max,
            'mean': self.mean,
            'effective_sample_size': self.effective_sample_size,
            'clipped_censoring_factors': self.clipped_censoring_factors,
            'truncated_rows': self.truncated_rows,
            'components': {k: v.to_dict() for k, v in self.components.items()},
        }


@dataclass(frozen=True)
class WeightBundle:
    """扩展表每行的权重分量，total = treatment × mediator × censoring"""
    treatment: np.ndarray
    mediator: np.ndarray
    censoring: np.ndarray
    total: np.ndarray
    diagnostics: WeightDiagnostics


# 模型拟合

def fit_treatment_model(subjects: pd.DataFrame, formula: ModelFormula, P: int) -> TreatmentModel:
    """在受试者级数据上拟合暴露的多项 logistic 模型"""
    fit = fit_multinomial(formula.design(subjects), subjects[EXPOSURE].to_numpy(dtype=int), n_categories=P)
    logger.info("暴露模型: %d 个受试者, %d 次迭代", len(subjects), fit.n_iterations)
    return TreatmentModel(formula, fit)


def mediator_rows(long: pd.DataFrame) -> pd.DataFrame:
    """中介测量行 (_visit >= 1)，附加 visit_time = Start"""
    rows = long[long['_visit'] >= 1].copy()
    rows[VISIT_TIME] = rows['Start'].astype(float)
    return rows


def fit_mediator_model(
    long: pd.DataFrame,
    formula: ModelFormula,
    levels: int,
    pooled: bool = True,
) -> MediatorModel:
    """
    在长格式的中介测量行上拟合中介模型

    Args:
        long: 长格式表
        formula: 模型公式 (可引用 A、历史列、基线协变量与 visit_time)
        levels: 中介水平数 Q+1
        pooled: 跨访视合并拟合；否则每个访视单独拟合，并去掉该访视上取值恒定的列

    Returns:
        中介模型
    """
    rows = mediator_rows(long)
    y = rows[CURRENT_MEDIATOR].to_numpy(dtype=int)
    design = formula.design(rows)
    if pooled:
        fits = {None: fit_multinomial(design, y, n_categories=levels)}
    else:
        fits = {}
        visits = rows['_visit'].to_numpy()
        for visit in sorted(set(visits.tolist())):
            mask = visits == visit
            sub = drop_constant_columns(DesignMatrix(design.values[mask], design.column_names))
            if len(sub.column_names) < len(design.column_names):
                logger.debug("访视 %d 去掉恒定列: %s", visit,
                             sorted(set(design.column_names) - set(sub.column_names)))
            fits[int(visit)] = fit_multinomial(sub, y[mask], n_categories=levels)
    logger.info("中介模型: %d 行, %s", len(rows), "合并拟合" if pooled else f"{len(fits)} 个访视")
    return MediatorModel(formula, pooled, fits)


def survival_data(long: pd.DataFrame, formula: ModelFormula, weights: Optional[np.ndarray] = None) -> SurvivalData:
    """长格式 -> SurvivalData (协变量不含截距)"""
    if formula.column_names:
        design = formula.design(long, intercept=False)
        X, names = design.values, design.column_names
    else:
        X, names = np.zeros((len(long), 0)), ()
    return SurvivalData(
        start=long['Start'].to_numpy(dtype=float),
        stop=long['Stop'].to_numpy(dtype=float),
        status=long['Status'].to_numpy(dtype=int),
        last=long['_last'].to_numpy(dtype=bool),
        X=X,
        weights=np.ones(len(long)) if weights is None else weights,
        column_names=names,
    )


def _censoring_hazard(long: pd.DataFrame, formula: ModelFormula) -> Optional[CensoringHazard]:
    data = survival_data(long, formula)
    # 最晚观测时刻的删失视为研究结束的行政删失，不计入删失事件
    administrative = data.events(EventStatus.CENSORED) & (data.stop >= data.stop.max() - TIME_TOL)
    data = replace(data, status=np.where(administrative, ADMINISTRATIVE, data.status))
    if not data.events(EventStatus.CENSORED).any():
        logger.info("数据中没有研究结束前的删失，删失权重恒为 1")
        return None
    fit = fit_weighted_cox(data, EventStatus.CENSORED, events_first=True)
    return CensoringHazard(formula, fit, breslow_baseline(fit, data))


def fit_censoring_model(
    long: pd.DataFrame,
    mode: CensoringMode,
    history_formula: Optional[ModelFormula],
    exposure_formula: ModelFormula,
) -> CensoringModel:
    """
    按模式拟合删失风险模型

    Raises:
        MissingConfigKey: 历史模式下未提供 censoring_model
    """
    if mode is CensoringMode.NONE:
        return CensoringModel(mode)
    history = exposure = None
    if mode in (CensoringMode.HISTORY_STABILIZED, CensoringMode.HISTORY_UNSTABILIZED):
        if history_formula is None:
            raise MissingConfigKey("censoring_model")
        history = _censoring_hazard(long, history_formula)
    if mode in (CensoringMode.HISTORY_STABILIZED, CensoringMode.EXPOSURE_ONLY):
        exposure = _censoring_hazard(long, exposure_formula)
    return CensoringModel(mode, history, exposure)


# 权重分量

def treatment_weight(subjects: pd.DataFrame, model: TreatmentModel) -> np.ndarray:
    """
    每个受试者的暴露权重 1 / Pr(A = a_obs | L0)

    Raises:
        DegeneratePropensity: 观测暴露的预测概率 < 1e-6
    """
    probs = model.probabilities(subjects)
    observed = probs[np.arange(len(subjects)), subjects[EXPOSURE].to_numpy(dtype=int)]
    low = observed < PROBABILITY_FLOOR
    if low.any():
        first = subjects['id'].to_numpy()[low][0]
        raise DegeneratePropensity(f"id={first} 的观测暴露预测概率 {observed[low][0]:.3e} < {PROBABILITY_FLOOR:g}")
    return 1.0 / observed


def mediator_ratios(rows: pd.DataFrame, model: MediatorModel, a_star) -> np.ndarray:
    """中介测量行上的单次比值 Pr(M|a*, ...) / Pr(M|a, ...)"""
    observed = rows[CURRENT_MEDIATOR].to_numpy(dtype=int)
    index = np.arange(len(rows))
    a = rows[EXPOSURE].to_numpy(dtype=float)
    a_star = np.broadcast_to(np.asarray(a_star, dtype=float), (len(rows),))
    denominator = model.probabilities(rows, a)[index, observed]
    low = denominator < PROBABILITY_FLOOR
    if low.any():
        first = rows['id'].to_numpy()[low][0]
        raise DegenerateMediatorProb(
            f"id={first} 的中介预测概率 {denominator[low][0]:.3e} < {PROBABILITY_FLOOR:g}")
    numerator = denominator.copy()
    differ = np.flatnonzero(a_star != a)
    if len(differ):
        probs = model.probabilities(rows.iloc[differ], a_star[differ])
        numerator[differ] = probs[np.arange(len(differ)), observed[differ]]
    return numerator / denominator


def mediator_weight(long: pd.DataFrame, model: MediatorModel, a_star) -> np.ndarray:
    """
    长格式每行的中介权重: 截至该行起始访视的比值累乘

    _visit = 0 的行 (尚无中介测量) 为空乘积 1；a* = a 的行恒为 1。

    Args:
        long: 长格式表
        model: 中介模型
        a_star: 假设暴露 (标量或与长格式行数等长的数组)

    Returns:
        每行的权重
    """
    a_star = np.broadcast_to(np.asarray(a_star, dtype=float), (len(long),))
    measured = long['_visit'].to_numpy() >= 1
    ratio = np.ones(len(long))
    if measured.any():
        ratio[measured] = mediator_ratios(mediator_rows(long), model, a_star[measured])
    return pd.Series(ratio, index=long.index).groupby(long['id'].to_numpy(), sort=False).cumprod().to_numpy()


def _log_survival_before_stop(long: pd.DataFrame, hazard: CensoringHazard) -> Tuple[np.ndarray, int]:
    """每行的 log G(stop-)，沿受试者累计"""
    data = survival_data(long, hazard.formula)
    closed, open_, clipped = interval_log_survival(hazard.fit, hazard.baseline, data)
    previous = pd.Series(closed).groupby(long['id'].to_numpy(), sort=False).cumsum().to_numpy() - closed
    return previous + open_, clipped


def censoring_weight(long: pd.DataFrame, model: CensoringModel) -> Tuple[np.ndarray, int]:
    """
    长格式每行的删失权重 (在行的 stop 时刻左极限处评估删失生存函数)

    none: 1；exposure_only: 1/G_exp；history_unstabilized: 1/G_hist；
    history_stabilized: G_exp/G_hist。

    Returns:
        (每行权重, 被截断的乘积极限因子个数)
    """
    log_weight = np.zeros(len(long))
    clipped = 0
    if model.mode is CensoringMode.NONE:
        return np.ones(len(long)), 0
    if model.history is not None:
        log_hist, n = _log_survival_before_stop(long, model.history)
        log_weight -= log_hist
        clipped += n
    if model.exposure is not None:
        log_exp, n = _log_survival_before_stop(long, model.exposure)
        clipped += n
        if model.mode is CensoringMode.EXPOSURE_ONLY:
            log_weight -= log_exp
        elif model.history is not None:
            log_weight += log_exp
    return np.exp(log_weight), clipped


def truncate(weights: np.ndarray, pct: Optional[float]) -> Tuple[np.ndarray, int]:
    """按百分位对称截断 (pct, 100 - pct)；返回新权重与被截断的行数"""
    if pct is None or len(weights) == 0:
        return weights, 0
    low, high = np.percentile(weights, [pct, 100 - pct])
    capped = np.clip(weights, low, high)
    return capped, int(np.sum(capped != weights))


def assign_weights(
    expanded: pd.DataFrame,
    long: pd.DataFrame,
    subjects: pd.DataFrame,
    models: NuisanceModels,
    truncate_pct: Optional[float] = None,
) -> Tuple[pd.DataFrame, WeightBundle]:
    """
    为扩展表的每一行计算权重

    case_weight = 暴露权重 × 中介权重 (⌊stop⌋ 处) × 删失权重，可选百分位截断。

    Args:
        expanded: 扩展表 (含 Astar 与 _row)
        long: 对应的长格式表
        subjects: 受试者级数据 (id, A, 基线协变量)
        models: 已拟合的干扰模型
        truncate_pct: 截断百分位，None 表示不截断

    Returns:
        (写入权重列的扩展表, 权重分量)
    """
    with stage("weights"):
        w_subject = pd.Series(treatment_weight(subjects, models.treatment), index=subjects['id'].to_numpy())
        w_treatment_long = w_subject.loc[long['id'].to_numpy()].to_numpy()

        levels = sorted(set(expanded[HYPOTHETICAL].astype(int).tolist()))
        w_mediator_long = {a_star: mediator_weight(long, models.mediator, a_star) for a_star in levels}
        w_censoring_long, clipped = censoring_weight(long, models.censoring)

        row = expanded['_row'].to_numpy()
        astar = expanded[HYPOTHETICAL].to_numpy(dtype=int)
        w_treatment = w_treatment_long[row]
        w_mediator = np.empty(len(expanded))
        for a_star, values in w_mediator_long.items():
            mask = astar == a_star
            w_mediator[mask] = values[row[mask]]
        w_censoring = w_censoring_long[row]

        total, truncated = truncate(w_treatment * w_mediator * w_censoring, truncate_pct)
        if truncated:
            logger.info("权重截断: %d 行被截断到 %g/%g 百分位", truncated, truncate_pct, 100 - truncate_pct)

    diagnostics = WeightDiagnostics(
        min=float(total.min()),
        max=float(total.max()),
        mean=float(total.mean()),
        effective_sample_size=float(total.sum() ** 2 / np.sum(total ** 2)),
        clipped_censoring_factors=clipped,
        truncated_rows=truncated,
        components={
            'treatment': ComponentSummary.of(w_treatment),
            'mediator': ComponentSummary.of(w_mediator),
            'censoring': ComponentSummary.of(w_censoring),
        },
    )
    out = expanded.copy()
    out['w_treatment'] = w_treatment
    out['w_mediator'] = w_mediator
    out['w_censoring'] = w_censoring
    out['case_weight'] = total
    bundle = WeightBundle(w_treatment, w_mediator, w_censoring, total, diagnostics)
    return out, bundle


WEIGHT_COLUMNS = ['id', 'Start', 'Stop', EXPOSURE, HYPOTHETICAL,
                  'w_treatment', 'w_mediator', 'w_censoring', 'case_weight']


def write_weights(weighted: pd.DataFrame, path: str) -> None:
    """写出每行的权重分量"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    weighted[WEIGHT_COLUMNS].rename(columns={'case_weight': 'weight'}).to_csv(
        path, index=False, lineterminator='\n')
