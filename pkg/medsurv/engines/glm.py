"""
(多项) Logistic 回归

加权多项 logistic 回归的极大似然估计，用于暴露模型和中介模型。
观测到的最小类别为参照类别；未观测到的类别不参与拟合，预测概率为 0。
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

from ..errors import InvalidConfigValue, SeparationDetected
from .design import DesignMatrix
from .newton import check_rank, maximize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FittedGlm:
    """
    多项 logistic 拟合结果

    coefficients 的第 i 行对应 categories[i + 1] 相对参照类别 categories[0] 的系数。
    """
    coefficients: np.ndarray
    categories: Tuple[int, ...]
    n_categories: int
    column_names: Tuple[str, ...]
    converged: bool
    log_likelihood: float
    n_iterations: int

    def to_dict(self) -> Dict[str, object]:
        return {
            'categories': list(self.categories),
            'columns': list(self.column_names),
            'coefficients': {
                str(c): [float(v) for v in row]
                for c, row in zip(self.categories[1:], self.coefficients)
            },
            'converged': self.converged,
            'log_likelihood': float(self.log_likelihood),
            'iterations': self.n_iterations,
        }


def _as_array(X: Union[DesignMatrix, np.ndarray]) -> np.ndarray:
    return X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)


def _column_names(X: Union[DesignMatrix, np.ndarray]) -> Tuple[str, ...]:
    if isinstance(X, DesignMatrix):
        return X.column_names
    return tuple(f"x{j}" for j in range(np.asarray(X).shape[1]))


def _one_hot(y: np.ndarray, categories: Sequence[int]) -> np.ndarray:
    return np.column_stack([(y == c).astype(float) for c in categories[1:]])


def _log_norm(eta: np.ndarray) -> np.ndarray:
    return logsumexp(np.column_stack([np.zeros(len(eta)), eta]), axis=1)


def _loglik(theta: np.ndarray, X: np.ndarray, Y: np.ndarray, w: np.ndarray) -> float:
    eta = X @ theta.T
    return float(np.sum(w * (np.sum(Y * eta, axis=1) - _log_norm(eta))))


def _probabilities(theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """非参照类别的概率 (n × k)"""
    eta = X @ theta.T
    return np.exp(eta - _log_norm(eta)[:, None])


def _score(theta: np.ndarray, X: np.ndarray, Y: np.ndarray, w: np.ndarray) -> np.ndarray:
    return ((Y - _probabilities(theta, X)) * w[:, None]).T @ X


def _hessian(theta: np.ndarray, X: np.ndarray, w: np.ndarray) -> np.ndarray:
    k, p = theta.shape
    P = _probabilities(theta, X)
    H = np.zeros((k * p, k * p))
    for c in range(k):
        for d in range(c, k):
            block = -(X.T * (w * P[:, c] * ((c == d) - P[:, d]))) @ X
            H[c * p:(c + 1) * p, d * p:(d + 1) * p] = block
            H[d * p:(d + 1) * p, c * p:(c + 1) * p] = block.T
    return H


def _weights(case_weights, n: int) -> np.ndarray:
    return np.ones(n) if case_weights is None else np.asarray(case_weights, dtype=float)


def multinomial_log_likelihood(
    coefficients: np.ndarray,
    X: Union[DesignMatrix, np.ndarray],
    y: Sequence[int],
    case_weights: Optional[Sequence[float]] = None,
) -> float:
    """
    加权多项 logistic 对数似然 (类别 0..C-1，类别 0 为参照)

    Args:
        coefficients: (C-1) × p 系数矩阵
        X: 设计矩阵
        y: 类别标签
        case_weights: 个体权重，默认全为 1

    Returns:
        对数似然值
    """
    theta = np.atleast_2d(np.asarray(coefficients, dtype=float))
    y = np.asarray(y)
    Y = _one_hot(y, range(theta.shape[0] + 1))
    return _loglik(theta, _as_array(X), Y, _weights(case_weights, len(y)))


def multinomial_score(
    coefficients: np.ndarray,
    X: Union[DesignMatrix, np.ndarray],
    y: Sequence[int],
    case_weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """对数似然关于系数的解析梯度，形状同 coefficients"""
    theta = np.atleast_2d(np.asarray(coefficients, dtype=float))
    y = np.asarray(y)
    Y = _one_hot(y, range(theta.shape[0] + 1))
    return _score(theta, _as_array(X), Y, _weights(case_weights, len(y)))


def _prepare(X, y, case_weights):
    X = _as_array(X)
    y = np.asarray(y).astype(int)
    if X.ndim != 2 or len(y) != X.shape[0]:
        raise InvalidConfigValue(f"响应长度 {len(y)} 与设计矩阵行数 {X.shape[0]} 不一致")
    w = _weights(case_weights, len(y))
    if len(w) != len(y) or np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise InvalidConfigValue("个体权重必须为正的有限值")
    return X, y, w


def _point_mass(category: int, n_categories: int, names, p: int) -> FittedGlm:
    logger.debug("响应只有一个观测类别 %d，使用点质量拟合", category)
    return FittedGlm(
        coefficients=np.zeros((0, p)),
        categories=(category,),
        n_categories=n_categories,
        column_names=tuple(names),
        converged=True,
        log_likelihood=0.0,
        n_iterations=0,
    )


def fit_multinomial(
    X: Union[DesignMatrix, np.ndarray],
    y: Sequence[int],
    case_weights: Optional[Sequence[float]] = None,
    n_categories: Optional[int] = None,
) -> FittedGlm:
    """
    拟合加权多项 logistic 回归

    Args:
        X: 设计矩阵 (第一列为截距)
        y: 类别标签 0..C-1
        case_weights: 正的个体权重，可选
        n_categories: 类别数 C，默认 max(y) + 1

    Returns:
        拟合结果

    Raises:
        SeparationDetected: 系数发散 (完全/准完全分离)
        RankDeficient: 设计矩阵列秩不足
        NonConvergence: 迭代未收敛
    """
    names = _column_names(X)
    X, y, w = _prepare(X, y, case_weights)
    C = int(n_categories if n_categories is not None else y.max() + 1)
    if C < 2:
        raise InvalidConfigValue("多项 logistic 回归至少需要两个类别")
    if np.any((y < 0) | (y >= C)):
        raise InvalidConfigValue(f"类别标签必须在 0..{C - 1} 之间")

    categories = tuple(int(c) for c in np.unique(y))
    if len(categories) == 1:
        return _point_mass(categories[0], C, names, X.shape[1])

    check_rank(X)
    Y = _one_hot(y, categories)
    k, p = len(categories) - 1, X.shape[1]

    result = maximize(
        objective=lambda t: _loglik(t.reshape(k, p), X, Y, w),
        derivatives=lambda t: (
            _score(t.reshape(k, p), X, Y, w).ravel(),
            _hessian(t.reshape(k, p), X, w),
        ),
        theta0=np.zeros(k * p),
        divergence=SeparationDetected,
    )
    return FittedGlm(
        coefficients=result.theta.reshape(k, p),
        categories=categories,
        n_categories=C,
        column_names=tuple(names),
        converged=result.converged,
        log_likelihood=result.log_likelihood,
        n_iterations=result.n_iterations,
    )


def fit_logistic(
    X: Union[DesignMatrix, np.ndarray],
    y: Sequence[int],
    case_weights: Optional[Sequence[float]] = None,
) -> FittedGlm:
    """
    二分类 logistic 回归 (IRLS)

    结果格式与 fit_multinomial 的 C=2 情形相同。
    """
    names = _column_names(X)
    X, y, w = _prepare(X, y, case_weights)
    if np.any((y != 0) & (y != 1)):
        raise InvalidConfigValue("logistic 回归的响应必须是 0/1")
    if len(np.unique(y)) == 1:
        return _point_mass(int(y[0]), 2, names, X.shape[1])

    check_rank(X)

    def loglik(beta: np.ndarray) -> float:
        eta = X @ beta
        # log(1 + e^eta) 的稳定形式
        return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))

    def derivatives(beta: np.ndarray):
        mu = expit(X @ beta)
        return X.T @ (w * (y - mu)), -(X.T * (w * mu * (1 - mu))) @ X

    result = maximize(loglik, derivatives, np.zeros(X.shape[1]), SeparationDetected)
    return FittedGlm(
        coefficients=result.theta[None, :],
        categories=(0, 1),
        n_categories=2,
        column_names=tuple(names),
        converged=result.converged,
        log_likelihood=result.log_likelihood,
        n_iterations=result.n_iterations,
    )


def predict_proba(fit: FittedGlm, X: Union[DesignMatrix, np.ndarray]) -> np.ndarray:
    """
    所有类别的预测概率 (n × C)

    Args:
        fit: 拟合结果
        X: 设计矩阵 (列与拟合时一致)

    Returns:
        每行和为 1 的概率矩阵
    """
    X = np.atleast_2d(_as_array(X))
    probs = np.zeros((X.shape[0], fit.n_categories))
    if len(fit.categories) == 1:
        probs[:, fit.categories[0]] = 1.0
        return probs
    eta = np.column_stack([np.zeros(X.shape[0]), X @ fit.coefficients.T])
    probs[:, list(fit.categories)] = np.exp(eta - logsumexp(eta, axis=1)[:, None])
    return probs


def predict_prob(fit: FittedGlm, x_row: Sequence[float], category: int) -> float:
    """单行单类别的预测概率 (softmax over (0, 线性预测值))"""
    if not 0 <= category < fit.n_categories:
        raise InvalidConfigValue(f"类别 {category} 超出范围 0..{fit.n_categories - 1}")
    return float(predict_proba(fit, np.asarray(x_row, dtype=float)[None, :])[0, category])
