"""
终端表格

系数表、效应分解表、权重诊断、oracle 真值与校验结果的 rich 表格。
"""

from typing import Iterable, Optional, Sequence, Tuple

from rich import box
from rich.table import Table

from .dataset import Finding
from .pipeline import CoefficientRow, EffectDecomposition
from .simulate import TrueEffects
from .weights import WeightDiagnostics

CAUSE_NAMES = {1: "主要事件", 2: "竞争事件"}


def _number(value: Optional[float], digits: int = 3) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def _interval(ci: Optional[Tuple[float, float]], digits: int = 3) -> str:
    return "-" if ci is None else f"({ci[0]:.{digits}f}, {ci[1]:.{digits}f})"


def _cause(cause: int) -> str:
    return f"{cause} {CAUSE_NAMES.get(cause, '')}".strip()


def coefficient_table(rows: Sequence[CoefficientRow]) -> Table:
    """自然效应模型系数: 估计值、95% 百分位区间、bootstrap 标准误、p 值"""
    table = Table(title="自然效应模型系数", box=box.ROUNDED)
    table.add_column("病因", style="cyan")
    table.add_column("系数", style="magenta")
    table.add_column("估计值", style="green", justify="right")
    table.add_column("95% CI", justify="right")
    table.add_column("SE", justify="right")
    table.add_column("p", justify="right")

    for row in rows:
        table.add_row(
            _cause(row.cause),
            f"{row.label} ({row.name})" if row.label != row.name else row.name,
            _number(row.estimate),
            _interval(row.ci),
            _number(row.se),
            _number(row.p_value),
        )
    return table


def decomposition_table(decomposition: EffectDecomposition) -> Table:
    """风险比分解 HR_TE = HR_DE × HR_IE 及中介比例"""
    table = Table(title="效应分解 (风险比)", box=box.ROUNDED)
    table.add_column("病因", style="cyan")
    table.add_column("对比 a -> a*", style="magenta")
    for effect in ("TE", "DE", "IE"):
        table.add_column(f"HR_{effect}", style="green", justify="right")
        table.add_column("95% CI", justify="right")
    table.add_column("中介比例", justify="right")

    for entry in decomposition.entries:
        ratios = entry.estimate.hazard_ratios()
        cells = [_cause(entry.cause), f"{entry.a} -> {entry.a_star}"]
        for effect in ("TE", "DE", "IE"):
            cells += [_number(ratios[effect]), _interval(entry.intervals.get(effect))]
        mp = entry.estimate.mediated_proportion
        cells.append("-" if mp is None else f"{mp * 100:.1f}%")
        table.add_row(*cells)
    return table


def diagnostics_table(diagnostics: WeightDiagnostics) -> Table:
    table = Table(title="权重诊断", box=box.ROUNDED)
    table.add_column("分量", style="cyan")
    table.add_column("最小", justify="right")
    table.add_column("最大", justify="right")
    table.add_column("均值", justify="right")
    for name, summary in diagnostics.components.items():
        table.add_row(name, _number(summary.min, 4), _number(summary.max, 4), _number(summary.mean, 4))
    table.add_row("总权重", _number(diagnostics.min, 4), _number(diagnostics.max, 4),
                  _number(diagnostics.mean, 4), style="bold")
    table.caption = (f"有效样本量 {diagnostics.effective_sample_size:.1f}，"
                     f"裁剪删失因子 {diagnostics.clipped_censoring_factors}，"
                     f"截断行 {diagnostics.truncated_rows}")
    return table


def oracle_table(effects: Sequence[TrueEffects]) -> Table:
    table = Table(title="真值风险比 (oracle)", box=box.ROUNDED)
    table.add_column("病因", style="cyan")
    table.add_column("对比 a -> a*", style="magenta")
    table.add_column("HR_TE", style="green", justify="right")
    table.add_column("HR_DE", style="green", justify="right")
    table.add_column("HR_IE", style="green", justify="right")
    for effect in effects:
        table.add_row(_cause(effect.cause), f"{effect.a} -> {effect.a_star}",
                      _number(effect.hr_te, 6), _number(effect.hr_de, 6), _number(effect.hr_ie, 6))
    return table


def findings_table(findings: Iterable[Finding], limit: int = 50) -> Table:
    """校验问题 (最多显示 limit 条)"""
    findings = list(findings)
    table = Table(title=f"校验问题 ({len(findings)} 条)", box=box.ROUNDED)
    table.add_column("id", style="cyan")
    table.add_column("字段", style="magenta")
    table.add_column("规则", style="red")
    for finding in findings[:limit]:
        table.add_row(finding.subject_id, finding.field, finding.rule)
    if len(findings) > limit:
        table.caption = f"... 及其他 {len(findings) - limit} 条"
    return table
