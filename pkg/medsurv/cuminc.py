"""
反事实累积发生率

在所有病因的 Breslow 跳跃点合并网格上，用离散乘积极限递推计算 (a, a*) 下
各病因的累积发生率 (竞争终点的 Aalen-Johansen 形式)。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import pandas as pd

from .config import ModelKind
from .engines.cox import BaselineHazard
from .errors import UnsupportedModel
from .pipeline import INTERACTION, NaturalEffectFit
from .reshape import EXPOSURE, HYPOTHETICAL

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CifCurve:
    """单个病因的累积发生率阶梯函数 (第一个点为 (0, 0))"""
    cause: int
    a: int
    a_star: int
    times: np.ndarray
    cif: np.ndarray

    def at(self, t: float) -> float:
        index = int(np.searchsorted(self.times, t, side='right')) - 1
        return float(self.cif[max(index, 0)])


@dataclass(frozen=True)
class CifResult:
    a: int
    a_star: int
    times: np.ndarray
    curves: Mapping[int, CifCurve]
    survival: np.ndarray
    rescaled: int

    def to_frame(self) -> pd.DataFrame:
        """长格式: time, cause, cif, surv"""
        frames = [
            pd.DataFrame({'time': self.times, 'cause': cause, 'cif': curve.cif, 'surv': self.survival})
            for cause, curve in sorted(self.curves.items())
        ]
        return pd.concat(frames, ignore_index=True)


def linear_predictor(coefficients: Mapping[str, float], model_kind: ModelKind, a: int, a_star: int) -> float:
    lp = coefficients[EXPOSURE] * a + coefficients[HYPOTHETICAL] * a_star
    if model_kind is ModelKind.INTERACTION:
        lp += coefficients[INTERACTION] * a * a_star
    return lp


def incidence_curves(
    coefficients: Mapping[int, Mapping[str, float]],
    baselines: Mapping[int, BaselineHazard],
    model_kind: ModelKind,
    a: int,
    a_star: int,
) -> CifResult:
    """
    由各病因的系数与基线累积风险计算累积发生率

    h_j(s) = dΛ0_j(s) · exp(线性预测值)；S(s-) = Π_{u<s} (1 - Σ_j h_j(u))；
    F_j(t) = Σ_{s<=t} S(s-) h_j(s)。某个时刻 Σ_j h_j > 1 时按比例缩放到 1 并计数。

    Raises:
        UnsupportedModel: 模型 5 (以基线协变量为条件)
    """
    if model_kind is ModelKind.CONDITIONAL_ON_BASELINE:
        raise UnsupportedModel("以基线协变量为条件的模型不支持累积发生率曲线")

    causes = sorted(baselines)
    grid = np.unique(np.concatenate([baselines[c].jump_times for c in causes] + [np.zeros(0)]))
    hazards = np.zeros((len(grid), len(causes)))
    for j, cause in enumerate(causes):
        baseline = baselines[cause]
        index = np.searchsorted(grid, baseline.jump_times)
        risk = np.exp(linear_predictor(coefficients[cause], model_kind, a, a_star))
        hazards[index, j] = baseline.increments * risk

    total = hazards.sum(axis=1)
    over = total > 1
    rescaled = int(over.sum())
    if rescaled:
        logger.warning("有 %d 个时刻的总离散风险 > 1，已缩放", rescaled)
        hazards[over] /= total[over, None]
        total = hazards.sum(axis=1)

    survival = np.cumprod(np.clip(1.0 - total, 0.0, 1.0))
    before = np.concatenate([[1.0], survival[:-1]])
    cif = np.cumsum(before[:, None] * hazards, axis=0)

    times = np.concatenate([[0.0], grid])
    curves = {
        cause: CifCurve(cause, a, a_star, times, np.concatenate([[0.0], cif[:, j]]))
        for j, cause in enumerate(causes)
    }
    return CifResult(a, a_star, times, curves, np.concatenate([[1.0], survival]), rescaled)


def cumulative_incidence(fit: NaturalEffectFit, a: int, a_star: int) -> CifResult:
    """拟合结果在 (a, a*) 下的累积发生率"""
    return incidence_curves(
        {c: cf.coefficients for c, cf in fit.causes.items()},
        {c: cf.baseline for c, cf in fit.causes.items()},
        fit.model_kind, a, a_star,
    )


def curves_from_report(report: Mapping[str, object], a: int, a_star: int) -> CifResult:
    """
    从 fit 命令输出的报告 JSON 重建累积发生率

    Args:
        report: 报告字典 (含 model、coefficients 与 baseline_hazards)
        a: 暴露
        a_star: 中介路径上的暴露

    Returns:
        累积发生率
    """
    model_kind = ModelKind(report['model'])
    coefficients: Dict[int, Dict[str, float]] = {}
    for row in report['coefficients']:
        coefficients.setdefault(int(row['cause']), {})[row['name']] = float(row['estimate'])
    baselines = {int(b['cause']): BaselineHazard.from_dict(b) for b in report['baseline_hazards']}
    return incidence_curves(coefficients, baselines, model_kind, a, a_star)


def write_curves(result: CifResult, path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    result.to_frame().to_csv(path, index=False, lineterminator='\n', float_format='%.17g')
