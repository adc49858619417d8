"""
设计矩阵构建

模型公式由主效应项列表和交互项列表组成，项名直接引用数据表的列名。
`A` 表示暴露；预测时可通过 overrides 将其替换为假设暴露值。
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..errors import ConfigError, InvalidConfigValue

INTERCEPT = "(Intercept)"


@dataclass(frozen=True)
class DesignMatrix:
    """n × p 数值矩阵 + 列名"""
    values: np.ndarray
    column_names: Tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise InvalidConfigValue(f"设计矩阵形状无效: {values.shape}")
        if values.shape[1] != len(self.column_names):
            raise InvalidConfigValue("设计矩阵列数与列名数量不一致")
        if not np.all(np.isfinite(values)):
            raise InvalidConfigValue("设计矩阵包含非有限值")
        object.__setattr__(self, 'values', values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def select(self, names: Sequence[str]) -> 'DesignMatrix':
        """按列名取子矩阵"""
        index = [self.column_names.index(n) for n in names]
        return DesignMatrix(self.values[:, index], tuple(names))


@dataclass(frozen=True)
class ModelFormula:
    """主效应项 + 交互项"""
    terms: Tuple[str, ...] = ()
    interactions: Tuple[Tuple[str, ...], ...] = ()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], key: str = "") -> 'ModelFormula':
        if not isinstance(data, Mapping):
            raise InvalidConfigValue(f"{key} 必须是包含 terms/interactions 的对象")
        terms = data.get('terms', [])
        interactions = data.get('interactions', [])
        if not all(isinstance(t, str) for t in terms):
            raise InvalidConfigValue(f"{key}.terms 必须是字符串列表")
        for inter in interactions:
            if not (isinstance(inter, (list, tuple)) and len(inter) >= 2
                    and all(isinstance(t, str) for t in inter)):
                raise InvalidConfigValue(f"{key}.interactions 的每一项必须是至少两个列名的列表")
        return cls(terms=tuple(terms), interactions=tuple(tuple(i) for i in interactions))

    def to_dict(self) -> Dict[str, Any]:
        return {'terms': list(self.terms), 'interactions': [list(i) for i in self.interactions]}

    @property
    def variables(self) -> Tuple[str, ...]:
        """公式引用的所有列名 (去重，保持顺序)"""
        names: List[str] = []
        for name in list(self.terms) + [t for inter in self.interactions for t in inter]:
            if name not in names:
                names.append(name)
        return tuple(names)

    @property
    def column_names(self) -> Tuple[str, ...]:
        return tuple(self.terms) + tuple(":".join(i) for i in self.interactions)

    def uses(self, name: str) -> bool:
        return name in self.variables

    def design(
        self,
        frame: pd.DataFrame,
        overrides: Optional[Mapping[str, Any]] = None,
        intercept: bool = True,
    ) -> DesignMatrix:
        """
        根据公式从数据表构建设计矩阵

        Args:
            frame: 数据表
            overrides: 列替换值 (标量或与行数等长的数组)，如 {'A': a_star}
            intercept: 是否在第一列加入截距

        Returns:
            设计矩阵

        Raises:
            ConfigError: 公式引用了不存在的列
        """
        overrides = dict(overrides or {})
        n = len(frame)

        def column(name: str) -> np.ndarray:
            if name in overrides:
                return np.broadcast_to(np.asarray(overrides[name], dtype=float), (n,)).astype(float)
            if name not in frame.columns:
                raise ConfigError(f"模型公式引用了不存在的列: {name}")
            return frame[name].to_numpy(dtype=float)

        columns = [np.ones(n)] if intercept else []
        names = [INTERCEPT] if intercept else []
        for term in self.terms:
            columns.append(column(term))
            names.append(term)
        for inter in self.interactions:
            product = np.ones(n)
            for term in inter:
                product = product * column(term)
            columns.append(product)
            names.append(":".join(inter))

        if not columns:
            raise InvalidConfigValue("模型公式为空且未包含截距")
        return DesignMatrix(np.column_stack(columns), tuple(names))


def drop_constant_columns(design: DesignMatrix, keep: Sequence[str] = (INTERCEPT,)) -> DesignMatrix:
    """去掉取值恒定的列 (保留 keep 中的列)"""
    values = design.values
    mask = [
        name in keep or np.ptp(values[:, j]) > 0
        for j, name in enumerate(design.column_names)
    ]
    return DesignMatrix(values[:, mask], tuple(n for n, m in zip(design.column_names, mask) if m))
