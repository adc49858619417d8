"""
分析报告 JSON

键顺序固定，浮点数统一按 17 位有效数字输出 (NaN/inf 输出为 null)，
相同的数据、配置与种子生成逐字节相同的报告。
"""

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np

from .. import __version__
from ..config import AnalysisConfig
from ..dataset import Dataset, data_checksum
from ..errors import DataFormatError
from ..pipeline import P_VALUE_METHOD, AnalysisResult, EffectEntry

INDENT = 2


def _scalar(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return format(value, '.17g') if math.isfinite(value) else "null"
    return json.dumps(str(value), ensure_ascii=False)


def dumps(obj: Any, level: int = 0) -> str:
    """
    序列化为 JSON 文本

    Args:
        obj: dict / list / tuple / ndarray / 标量的嵌套结构
        level: 当前缩进层级

    Returns:
        JSON 文本
    """
    pad = " " * (INDENT * (level + 1))
    end = " " * (INDENT * level)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {dumps(v, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{pad}{dumps(v, level + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    return _scalar(obj)


def sha256(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def fingerprint(config: AnalysisConfig, dataset: Dataset) -> Dict[str, str]:
    """配置与数据的指纹"""
    config_hash = sha256(dumps(config.to_dict()))
    data_hash = data_checksum(dataset)
    return {'config_sha256': config_hash, 'data_sha256': data_hash,
            'combined': sha256(config_hash + data_hash)}


def _entry(entry: EffectEntry) -> Dict[str, Any]:
    estimate = entry.estimate
    return {
        'cause': entry.cause,
        'a': entry.a,
        'a_star': entry.a_star,
        'hr_te': estimate.hr_te,
        'hr_de': estimate.hr_de,
        'hr_ie': estimate.hr_ie,
        'log_te': estimate.log_te,
        'log_de': estimate.log_de,
        'log_ie': estimate.log_ie,
        'mediated_proportion': estimate.mediated_proportion,
        'ci': {effect: list(ci) for effect, ci in entry.intervals.items()},
        'p_values': dict(entry.p_values),
    }


def build_report(
    config: AnalysisConfig,
    dataset: Dataset,
    result: AnalysisResult,
    timing: Optional[Mapping[str, float]] = None,
) -> Dict[str, Any]:
    """
    组装分析报告

    Args:
        config: 生效的分析配置 (命令行覆盖之后)
        dataset: 数据集
        result: 分析结果
        timing: 各阶段耗时 (秒)，仅在显式要求时记录

    Returns:
        报告字典
    """
    fit = result.fit
    report: Dict[str, Any] = {
        'software': {'name': 'medsurv', 'version': __version__},
        'fingerprint': fingerprint(config, dataset),
        'config': config.to_dict(),
        'model': fit.model_kind.value,
        'n_subjects': len(dataset),
        'coefficients': [
            {'cause': row.cause, 'name': row.name, 'label': row.label, 'estimate': row.estimate,
             'ci': list(row.ci) if row.ci else None, 'se': row.se, 'p_value': row.p_value}
            for row in result.coefficients
        ],
        'decomposition': [_entry(entry) for entry in result.decomposition.entries],
        'baseline_hazards': [fit.causes[c].baseline.to_dict() for c in sorted(fit.causes)],
        'cox': {str(c): fit.causes[c].fit.to_dict() for c in sorted(fit.causes)},
        'nuisance': fit.nuisance.to_dict(),
        'weights': fit.diagnostics.to_dict(),
        'bootstrap': None,
    }
    if result.bootstrap is not None:
        summary = result.bootstrap
        report['bootstrap'] = {
            'requested': summary.requested,
            'failed': summary.failed,
            'succeeded': summary.succeeded,
            'seed': summary.seed,
            'failures': dict(summary.failures),
            'interval': 'percentile 2.5/97.5',
            'p_value_method': P_VALUE_METHOD,
        }
    if timing is not None:
        report['timing'] = dict(timing)
    return report


def write_report(report: Mapping[str, Any], path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(report) + "\n", encoding='utf-8')


def load_report(path: str) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise DataFormatError(f"无法读取报告 {path}: {e}")
