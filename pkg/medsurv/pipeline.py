"""
自然效应分析流水线

步骤 1-7: 暴露模型 -> 长格式 -> 中介模型 -> 扩展表 -> 权重 (含删失) ->
每个病因的加权自然效应 Cox 模型 -> 效应分解 -> 非参数 bootstrap。
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from .config import AnalysisConfig, ModelKind, validate_config_against
from .dataset import Dataset, resample, subjects_frame, validate
from .engines.cox import BaselineHazard, CoxFit, breslow_baseline, fit_weighted_cox
from .engines.design import ModelFormula
from .errors import (
    InvalidConfigValue,
    MedsurvError,
    TooManyFailedReplicates,
    ValidationFailed,
    stage,
)
from .reshape import EXPOSURE, HYPOTHETICAL, expand_counterfactual, to_counting_process
from .weights import (
    NuisanceModels,
    WeightDiagnostics,
    assign_weights,
    fit_censoring_model,
    fit_mediator_model,
    fit_treatment_model,
    survival_data,
)

logger = logging.getLogger(__name__)

INTERACTION = f"{EXPOSURE}:{HYPOTHETICAL}"
# 系数名 -> 模型中的记号
COEFFICIENT_LABELS = {EXPOSURE: "alpha1", HYPOTHETICAL: "alpha2", INTERACTION: "alpha3"}
EFFECTS = ("TE", "DE", "IE")
MAX_FAILED_FRACTION = 0.05
P_VALUE_METHOD = "2*Phi(-|estimate|/bootstrap SE)"


@dataclass(frozen=True)
class CauseFit:
    """单个病因的自然效应模型拟合"""
    cause: int
    fit: CoxFit
    baseline: BaselineHazard

    @property
    def coefficients(self) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.fit.column_names, self.fit.coefficients)}


@dataclass(frozen=True)
class NaturalEffectFit:
    model_kind: ModelKind
    causes: Mapping[int, CauseFit]
    nuisance: NuisanceModels
    diagnostics: WeightDiagnostics
    baseline_reference: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class EffectEstimate:
    """
    一个对比 (a, a*) 的风险比分解

    hr_te 定义为 hr_de × hr_ie，乘法分解精确成立。
    """
    log_de: float
    log_ie: float

    @property
    def log_te(self) -> float:
        return self.log_de + self.log_ie

    @property
    def hr_de(self) -> float:
        return math.exp(self.log_de)

    @property
    def hr_ie(self) -> float:
        return math.exp(self.log_ie)

    @property
    def hr_te(self) -> float:
        return self.hr_de * self.hr_ie

    @property
    def mediated_proportion(self) -> Optional[float]:
        """log(HR_IE) / log(HR_TE)，总效应为 0 时无定义"""
        return self.log_ie / self.log_te if self.log_te != 0 else None

    def hazard_ratios(self) -> Dict[str, float]:
        return {'TE': self.hr_te, 'DE': self.hr_de, 'IE': self.hr_ie}


@dataclass(frozen=True)
class EffectEntry:
    cause: int
    a: int
    a_star: int
    estimate: EffectEstimate
    intervals: Mapping[str, Tuple[float, float]] = field(default_factory=dict)
    p_values: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class EffectDecomposition:
    entries: Tuple[EffectEntry, ...]

    def get(self, cause: int, a: int, a_star: int) -> EffectEntry:
        for entry in self.entries:
            if (entry.cause, entry.a, entry.a_star) == (cause, a, a_star):
                return entry
        raise KeyError((cause, a, a_star))


@dataclass(frozen=True)
class CoefficientRow:
    """系数表的一行: 估计值、百分位区间、bootstrap 标准误与 p 值"""
    cause: int
    name: str
    estimate: float
    ci: Optional[Tuple[float, float]] = None
    se: Optional[float] = None
    p_value: Optional[float] = None

    @property
    def label(self) -> str:
        return COEFFICIENT_LABELS.get(self.name, self.name)


@dataclass(frozen=True)
class BootstrapSummary:
    requested: int
    failed: int
    seed: int
    failures: Mapping[str, int] = field(default_factory=dict)

    @property
    def succeeded(self) -> int:
        return self.requested - self.failed


@dataclass(frozen=True)
class AnalysisResult:
    fit: NaturalEffectFit
    decomposition: EffectDecomposition
    coefficients: Tuple[CoefficientRow, ...]
    weighted: pd.DataFrame
    bootstrap: Optional[BootstrapSummary] = None


def outcome_formula(config: AnalysisConfig) -> ModelFormula:
    """自然效应 Cox 模型的协变量: 模型 1 (A, A*)，模型 2 加 A:A*，模型 5 加基线协变量"""
    kind = config.analysis.model_kind
    terms = [EXPOSURE, HYPOTHETICAL]
    interactions: List[Tuple[str, ...]] = []
    if kind is ModelKind.INTERACTION:
        interactions.append((EXPOSURE, HYPOTHETICAL))
    elif kind is ModelKind.CONDITIONAL_ON_BASELINE:
        terms += list(config.baseline_covariates)
        if config.analysis.baseline_interaction:
            interactions += [(HYPOTHETICAL, c) for c in config.baseline_covariates]
    return ModelFormula(terms=tuple(terms), interactions=tuple(interactions))


def decompose(
    coefficients: Mapping[str, float],
    model_kind: ModelKind,
    a: int,
    a_star: int,
    reference: Optional[Mapping[str, float]] = None,
) -> EffectEstimate:
    """
    由自然效应模型系数计算 (a, a*) 对比下的总/直接/间接效应

    模型 1: DE = α1(a*-a)，IE = α2(a*-a)；
    模型 2: DE = (α1 + α3 a*)(a*-a)，IE = (α2 + α3 a)(a*-a)；
    模型 5: IE 额外加上 Σ α'(A*:l0) · l0_ref，效应以基线参照值为条件。

    Args:
        coefficients: 系数名 -> 值 (A, Astar, A:Astar, Astar:<cov>)
        model_kind: 模型形式
        a: 参照暴露
        a_star: 对比暴露
        reference: 模型 5 的基线协变量参照值，缺省为 0

    Returns:
        对数尺度的效应
    """
    delta = a_star - a
    alpha1 = coefficients[EXPOSURE]
    alpha2 = coefficients[HYPOTHETICAL]
    if model_kind is ModelKind.INTERACTION:
        alpha3 = coefficients[INTERACTION]
        return EffectEstimate(log_de=(alpha1 + alpha3 * a_star) * delta,
                              log_ie=(alpha2 + alpha3 * a) * delta)
    if model_kind is ModelKind.CONDITIONAL_ON_BASELINE:
        reference = reference or {}
        prefix = f"{HYPOTHETICAL}:"
        shift = sum(value * reference.get(name[len(prefix):], 0.0)
                    for name, value in coefficients.items() if name.startswith(prefix))
        return EffectEstimate(log_de=alpha1 * delta, log_ie=(alpha2 + shift) * delta)
    return EffectEstimate(log_de=alpha1 * delta, log_ie=alpha2 * delta)


def check_inputs(dataset: Dataset, config: AnalysisConfig) -> None:
    """
    Raises:
        ValidationFailed: 数据或配置校验未通过
    """
    with stage("validate"):
        findings = validate(dataset) + validate_config_against(config, dataset)
        if findings:
            raise ValidationFailed(findings)


def fit_natural_effects(dataset: Dataset, config: AnalysisConfig) -> Tuple[NaturalEffectFit, pd.DataFrame]:
    """
    步骤 1-6 (不做输入校验)

    Returns:
        (拟合结果, 带权重的扩展表)
    """
    analysis = config.analysis
    with stage("treatment"):
        subjects = subjects_frame(dataset)
        treatment = fit_treatment_model(subjects, config.treatment_model, config.P)
    with stage("reshape"):
        long = to_counting_process(dataset, config.depth)
    with stage("mediator"):
        mediator = fit_mediator_model(long, config.mediator_model, config.variables.mediator_levels,
                                      config.mediator_pooled)
    with stage("reshape"):
        expanded = expand_counterfactual(long, config.P)
    with stage("censoring"):
        censoring = fit_censoring_model(long, analysis.censoring_mode, config.censoring_model,
                                        config.exposure_censoring_model)
    nuisance = NuisanceModels(treatment, mediator, censoring)
    weighted, bundle = assign_weights(expanded, long, subjects, nuisance, analysis.truncate_pct)

    formula = outcome_formula(config)
    causes: Dict[int, CauseFit] = {}
    with stage("cox"):
        data = survival_data(weighted, formula, weights=weighted['case_weight'].to_numpy())
        for cause in analysis.causes:
            fit = fit_weighted_cox(data, cause)
            causes[cause] = CauseFit(cause, fit, breslow_baseline(fit, data))
            logger.info("病因 %d: %d 个事件, 系数 %s", cause, fit.n_events,
                        ", ".join(f"{n}={v:.4f}" for n, v in causes[cause].coefficients.items()))

    natural = NaturalEffectFit(
        model_kind=analysis.model_kind,
        causes=causes,
        nuisance=nuisance,
        diagnostics=bundle.diagnostics,
        baseline_reference=dict(analysis.baseline_reference),
    )
    return natural, weighted


def _decompose_all(fit: NaturalEffectFit, contrasts: Sequence[Tuple[int, int]]) -> List[EffectEntry]:
    entries = []
    with stage("decompose"):
        for cause, cause_fit in fit.causes.items():
            for a, a_star in contrasts:
                estimate = decompose(cause_fit.coefficients, fit.model_kind, a, a_star, fit.baseline_reference)
                entries.append(EffectEntry(cause, a, a_star, estimate))
    return entries


def run_analysis(
    dataset: Dataset,
    config: AnalysisConfig,
    threads: int = 1,
    progress_callback: Optional[Callable[[int, int], None]] = None,
) -> AnalysisResult:
    """
    执行完整分析 (步骤 1-7)

    Args:
        dataset: 数据集
        config: 分析配置 (analysis.bootstrap 为 0 时只给出点估计)
        threads: bootstrap 并发线程数
        progress_callback: bootstrap 进度回调 (current, total)

    Returns:
        分析结果

    Raises:
        ValidationFailed: 输入校验未通过
        NumericalError: 各阶段的数值错误 (stage 已标注)
    """
    check_inputs(dataset, config)
    natural, weighted = fit_natural_effects(dataset, config)
    entries = _decompose_all(natural, config.analysis.contrasts)
    coefficients = [
        CoefficientRow(cause, name, value)
        for cause, cause_fit in natural.causes.items()
        for name, value in cause_fit.coefficients.items()
    ]
    summary = None
    if config.analysis.bootstrap_replicates > 0:
        with stage("bootstrap"):
            coefficients, entries, summary = bootstrap(
                dataset, config, coefficients, entries, threads, progress_callback)
    return AnalysisResult(
        fit=natural,
        decomposition=EffectDecomposition(tuple(entries)),
        coefficients=tuple(coefficients),
        weighted=weighted,
        bootstrap=summary,
    )


@dataclass(frozen=True)
class _Replicate:
    coefficients: np.ndarray
    log_effects: np.ndarray


def _replicate(dataset: Dataset, config: AnalysisConfig, r: int,
               coefficients: Sequence[CoefficientRow], entries: Sequence[EffectEntry]) -> _Replicate:
    rng = np.random.default_rng([config.analysis.seed, r])
    indices = rng.integers(0, len(dataset), size=len(dataset))
    natural, _ = fit_natural_effects(resample(dataset, indices), config)
    coef = np.array([natural.causes[row.cause].coefficients[row.name] for row in coefficients])
    effects = []
    for entry in entries:
        estimate = decompose(natural.causes[entry.cause].coefficients, natural.model_kind,
                             entry.a, entry.a_star, natural.baseline_reference)
        effects.append([estimate.log_te, estimate.log_de, estimate.log_ie])
    return _Replicate(coef, np.array(effects))


def _p_value(estimate: float, draws: np.ndarray) -> Optional[float]:
    if len(draws) < 2:
        return None
    se = float(np.std(draws, ddof=1))
    if se == 0:
        return None
    return float(2 * norm.cdf(-abs(estimate) / se))


def bootstrap(
    dataset: Dataset,
    config: AnalysisConfig,
    coefficients: Sequence[CoefficientRow],
    entries: Sequence[EffectEntry],
    threads: int = 1,
    progress_callback: Optional[Callable[[int, int], None]] = None,
) -> Tuple[List[CoefficientRow], List[EffectEntry], BootstrapSummary]:
    """
    非参数 bootstrap: 有放回抽取受试者并重复步骤 1-6

    第 r 次重复使用由 (seed, r) 派生的随机数流，结果与执行顺序和线程数无关。
    失败的重复 (数值错误或退化的重抽样) 被剔除并按错误码计数。

    Args:
        dataset: 原始数据集
        config: 分析配置
        coefficients: 点估计系数
        entries: 点估计效应分解
        threads: 并发线程数
        progress_callback: 进度回调 (current, total)

    Returns:
        (带区间的系数, 带区间的效应分解, bootstrap 摘要)

    Raises:
        TooManyFailedReplicates: 失败比例超过 5%
    """
    total = config.analysis.bootstrap_replicates
    if total < 1:
        raise InvalidConfigValue("bootstrap 次数必须 >= 1")
    results: List[Optional[_Replicate]] = [None] * total
    failures: Dict[str, int] = {}

    completed = 0
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        futures = {
            executor.submit(_replicate, dataset, config, r, coefficients, entries): r
            for r in range(total)
        }
        for future in as_completed(futures):
            r = futures[future]
            completed += 1
            if progress_callback:
                progress_callback(completed, total)
            try:
                results[r] = future.result()
            except MedsurvError as e:
                failures[e.code] = failures.get(e.code, 0) + 1
                logger.debug("bootstrap 第 %d 次失败: %s", r, e.structured())

    kept = [res for res in results if res is not None]
    failed = total - len(kept)
    if failed:
        logger.warning("bootstrap: %d/%d 次重复失败已剔除", failed, total)
    if failed > MAX_FAILED_FRACTION * total:
        raise TooManyFailedReplicates(
            f"{failed}/{total} 次重复失败 ({', '.join(f'{k}={v}' for k, v in sorted(failures.items()))})")

    summary = BootstrapSummary(total, failed, config.analysis.seed, dict(sorted(failures.items())))
    if not kept:
        return list(coefficients), list(entries), summary

    coef_draws = np.vstack([res.coefficients for res in kept])
    effect_draws = np.stack([res.log_effects for res in kept])

    rows = []
    for j, row in enumerate(coefficients):
        draws = coef_draws[:, j]
        low, high = np.percentile(draws, [2.5, 97.5])
        se = float(np.std(draws, ddof=1)) if len(draws) > 1 else None
        rows.append(CoefficientRow(row.cause, row.name, row.estimate, (float(low), float(high)),
                                   se, _p_value(row.estimate, draws)))

    out = []
    for i, entry in enumerate(entries):
        point = [entry.estimate.log_te, entry.estimate.log_de, entry.estimate.log_ie]
        intervals, p_values = {}, {}
        for k, effect in enumerate(EFFECTS):
            hr = np.exp(effect_draws[:, i, k])
            low, high = np.percentile(hr, [2.5, 97.5])
            intervals[effect] = (float(low), float(high))
            p = _p_value(point[k], effect_draws[:, i, k])
            if p is not None:
                p_values[effect] = p
        out.append(EffectEntry(entry.cause, entry.a, entry.a_star, entry.estimate, intervals, p_values))
    return rows, out, summary
