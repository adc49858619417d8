"""
Newton-Raphson 极大化

GLM 与 Cox 拟合共用的迭代器: 最小二乘求 Newton 方向 (平坦方向保持为 0)，
对数似然下降时步长折半，并在收敛点检查似然是否沿上升方向无界。
"""

import logging
from dataclasses import dataclass
from typing import Callable, Tuple, Type

import numpy as np

from ..errors import NonConvergence, NumericalError, RankDeficient

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 100
SCORE_TOL = 1e-8
LOGLIK_REL_TOL = 1e-10
MAX_HALVINGS = 20
DIVERGENCE_NORM = 1e3
RANK_TOL = 1e-10
# 收敛点沿上升方向移动 DIVERGENCE_NORM 后似然仍增加的判定阈值 (相对)
UNBOUNDED_TOL = 1e-12

Objective = Callable[[np.ndarray], float]
Derivatives = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class NewtonResult:
    theta: np.ndarray
    log_likelihood: float
    converged: bool
    n_iterations: int


def _direction(grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(-hess, grad, rcond=RANK_TOL)[0]


def _unbounded(objective: Objective, theta: np.ndarray, ll: float, direction: np.ndarray) -> bool:
    size = np.linalg.norm(direction)
    if not np.isfinite(size) or size == 0:
        return False
    far = theta + DIVERGENCE_NORM * direction / size
    ll_far = objective(far)
    return bool(np.isfinite(ll_far) and ll_far > ll + UNBOUNDED_TOL * max(1.0, abs(ll)))


def check_rank(X: np.ndarray) -> None:
    """
    列秩检查

    Raises:
        RankDeficient: 最小/最大奇异值 < 1e-10
    """
    if X.shape[1] == 0:
        return
    if X.shape[0] < X.shape[1]:
        raise RankDeficient(f"设计矩阵行数 {X.shape[0]} 少于列数 {X.shape[1]}")
    s = np.linalg.svd(X, compute_uv=False)
    ratio = s[-1] / s[0] if s[0] > 0 else 0.0
    if ratio < RANK_TOL:
        raise RankDeficient(f"设计矩阵列秩不足 (最小/最大奇异值 = {ratio:.3e})")


def maximize(
    objective: Objective,
    derivatives: Derivatives,
    theta0: np.ndarray,
    divergence: Type[NumericalError],
) -> NewtonResult:
    """
    Newton-Raphson 极大化凹的对数似然

    得分最大绝对值 < 1e-8 或对数似然相对变化 < 1e-10 时停止，最多 100 次迭代。

    Args:
        objective: 对数似然
        derivatives: 返回 (梯度, Hessian)
        theta0: 初始值
        divergence: 系数发散时抛出的异常类型

    Returns:
        迭代结果

    Raises:
        divergence: 迭代中系数范数超过 1e3，或收敛点处似然沿上升方向无界
        NonConvergence: 达到最大迭代次数仍未满足收敛条件
    """
    theta = np.asarray(theta0, dtype=float).copy()
    ll = objective(theta)
    converged = False
    iteration = 0
    grad, hess = derivatives(theta)

    for iteration in range(1, MAX_ITERATIONS + 1):
        if np.max(np.abs(grad), initial=0.0) < SCORE_TOL:
            converged = True
            iteration -= 1
            break

        direction = _direction(grad, hess)
        step = 1.0
        for _ in range(MAX_HALVINGS + 1):
            candidate = theta + step * direction
            ll_candidate = objective(candidate)
            if np.isfinite(ll_candidate) and ll_candidate >= ll:
                break
            step /= 2
        else:
            # 已在数值精度内无法上升
            converged = bool(np.max(np.abs(grad)) < 1e-6 * max(1.0, abs(ll)))
            break

        if np.linalg.norm(candidate) > DIVERGENCE_NORM:
            raise divergence(f"系数范数超过 {DIVERGENCE_NORM:g}")

        change = abs(ll_candidate - ll)
        theta, ll = candidate, ll_candidate
        grad, hess = derivatives(theta)
        if change <= LOGLIK_REL_TOL * max(abs(ll), np.finfo(float).tiny):
            converged = True
            break

    if theta.size and _unbounded(objective, theta, ll, _direction(grad, hess)):
        raise divergence("对数似然沿上升方向无界，系数趋于无穷")

    if not converged:
        score = float(np.max(np.abs(grad), initial=0.0))
        logger.debug("Newton 迭代停止: 第 %d 次，对数似然 %.6g，得分 %.3e", iteration, ll, score)
        raise NonConvergence(f"Newton 迭代 {iteration} 次后未收敛 (上限 {MAX_ITERATIONS}，得分最大绝对值 {score:.3e})")

    return NewtonResult(theta=theta, log_likelihood=ll, converged=converged, n_iterations=iteration)
