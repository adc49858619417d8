"""
medsurv 异常定义

所有库内异常都继承自 MedsurvError，携带错误码 (code)、详情 (detail)
以及出错的流水线阶段 (stage)。命令行根据异常类别决定退出码:
InputError -> 1，NumericalError -> 2。
"""

from contextlib import contextmanager
from typing import Iterator, List, Optional


class MedsurvError(Exception):
    """medsurv 异常基类"""

    exit_code = 2

    def __init__(self, detail: str = "", stage: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        self.stage = stage

    @property
    def code(self) -> str:
        return type(self).__name__

    def structured(self) -> str:
        """结构化错误行: stage=<s> code=<c> detail=<d>"""
        return f"stage={self.stage or '-'} code={self.code} detail={self.detail}"


# 输入与配置错误 (退出码 1)

class InputError(MedsurvError):
    exit_code = 1


class ValidationFailed(InputError):
    """数据集校验未通过，findings 为校验结果列表"""

    def __init__(self, findings: List, stage: Optional[str] = None):
        super().__init__(f"{len(findings)} 条校验问题", stage)
        self.findings = list(findings)


class ConfigError(InputError):
    pass


class MissingConfigKey(ConfigError):
    pass


class InvalidConfigValue(ConfigError):
    pass


class DataFormatError(InputError):
    pass


class UnsupportedModel(InputError):
    pass


# 数值错误 (退出码 2)

class NumericalError(MedsurvError):
    exit_code = 2


class SeparationDetected(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class NoEventsForCause(NumericalError):
    pass


class MonotoneLikelihood(NumericalError):
    pass


class DegeneratePropensity(NumericalError):
    pass


class DegenerateMediatorProb(NumericalError):
    pass


class TooManyFailedReplicates(NumericalError):
    pass


class StateSpaceTooLarge(NumericalError):
    pass


class NonProportionalTruth(NumericalError):
    pass


@contextmanager
def stage(name: str) -> Iterator[None]:
    """
    为经过的 MedsurvError 标注阶段名 (已有阶段的异常保持不变)

    Args:
        name: 阶段名，如 treatment / mediator / cox
    """
    try:
        yield
    except MedsurvError as e:
        if e.stage is None:
            e.stage = name
        raise
