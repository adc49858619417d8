"""
medsurv 命令行界面

提供 validate、reshape、fit、cuminc、simulate 和 oracle 六个命令。
退出码: 0 成功，1 输入/配置错误，2 数值错误；错误以 stage=<s> code=<c> detail=<d> 的形式写到标准错误。
"""

import logging
import time
from typing import List, Optional, Sequence, Tuple

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn

from . import __version__
from .config import CLI_CENSORING, AnalysisConfig, load_config
from .cuminc import curves_from_report, write_curves
from .dataset import Dataset, read_dataset, write_dataset
from .errors import MedsurvError, ValidationFailed, stage
from .pipeline import check_inputs, run_analysis
from .reshape import expand_counterfactual, to_counting_process, write_table
from .simulate import generate, load_dgp, oracle_true_hrs
from .tables import coefficient_table, decomposition_table, diagnostics_table, findings_table, oracle_table
from .utils.report import build_report, dumps, load_report, write_report
from .weights import write_weights

console = Console()
err_console = Console(stderr=True, markup=False, highlight=False)

logger = logging.getLogger("medsurv")


def setup_logging(verbose: bool) -> None:
    """在 medsurv 日志器上安装 RichHandler (只安装一次)"""
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        logger.addHandler(RichHandler(console=Console(stderr=True), show_path=False))
    logger.setLevel(logging.DEBUG if verbose else logging.WARNING)


def parse_contrast(ctx, param, value):
    """'a,astar' -> (a, a*)"""
    if value is None:
        return None
    values = value if isinstance(value, tuple) else (value,)
    contrasts = []
    for text in values:
        try:
            a, a_star = (int(v) for v in text.split(','))
        except ValueError:
            raise click.BadParameter(f"对比格式应为 a,astar: {text!r}")
        contrasts.append((a, a_star))
    return tuple(contrasts) if isinstance(value, tuple) else contrasts[0]


def load_inputs(data: str, config_path: str) -> Tuple[Dataset, AnalysisConfig]:
    with stage("validate"):
        config = load_config(config_path)
        dataset = read_dataset(data, config.schedule, config.variables)
    return dataset, config


@click.group()
@click.version_option(version=__version__, prog_name="medsurv")
@click.option('-v', '--verbose', is_flag=True, default=False, help='输出调试日志')
def cli(verbose: bool):
    """medsurv - 竞争风险下纵向中介的自然效应分析"""
    setup_logging(verbose)


@cli.command('validate')
@click.option('-d', '--data', required=True, help='短格式数据 CSV')
@click.option('-c', '--config', 'config_path', required=True, help='分析配置 JSON')
def validate_command(data: str, config_path: str):
    """校验数据集与配置"""
    dataset, config = load_inputs(data, config_path)
    check_inputs(dataset, config)
    console.print(f"[green]校验通过: {len(dataset)} 个受试者，{dataset.schedule.K} 次访视[/green]")


@cli.command()
@click.option('-d', '--data', required=True, help='短格式数据 CSV')
@click.option('-c', '--config', 'config_path', required=True, help='分析配置 JSON')
@click.option('-o', '--out', required=True, help='长格式输出 CSV')
@click.option('--expanded-out', default=None, help='按 A* 扩展后的表 CSV')
def reshape(data: str, config_path: str, out: str, expanded_out: Optional[str]):
    """短格式 -> 计数过程长格式"""
    dataset, config = load_inputs(data, config_path)
    check_inputs(dataset, config)
    with stage("reshape"):
        long = to_counting_process(dataset, config.depth)
        write_table(long, out)
        console.print(f"[green]长格式: {len(long)} 行 -> {out}[/green]")
        if expanded_out:
            expanded = expand_counterfactual(long, config.P)
            write_table(expanded, expanded_out)
            console.print(f"[green]扩展表: {len(expanded)} 行 -> {expanded_out}[/green]")


@cli.command()
@click.option('-d', '--data', required=True, help='短格式数据 CSV')
@click.option('-c', '--config', 'config_path', required=True, help='分析配置 JSON')
@click.option('-o', '--out', required=True, help='报告 JSON')
@click.option('-b', '--bootstrap', type=click.IntRange(min=0), default=None, help='bootstrap 次数 (覆盖配置)')
@click.option('-s', '--seed', type=click.IntRange(min=0), default=None, help='随机种子 (覆盖配置)')
@click.option('-n', '--threads', type=click.IntRange(min=1), default=1, help='bootstrap 线程数')
@click.option('--truncate-pct', type=click.FloatRange(0, 50, min_open=True, max_open=True), default=None,
              help='权重截断百分位，如 1 表示截断到 [1%, 99%]')
@click.option('--censoring', type=click.Choice(sorted(CLI_CENSORING)), default=None, help='删失权重模式')
@click.option('--weights-out', default=None, help='每行权重分量 CSV')
@click.option('--record-timing', is_flag=True, default=False, help='在报告中记录耗时')
def fit(data: str, config_path: str, out: str, bootstrap: Optional[int], seed: Optional[int], threads: int,
        truncate_pct: Optional[float], censoring: Optional[str], weights_out: Optional[str],
        record_timing: bool):
    """拟合自然效应模型并写出报告"""
    started = time.perf_counter()
    dataset, config = load_inputs(data, config_path)

    overrides = {}
    if bootstrap is not None:
        overrides['bootstrap_replicates'] = bootstrap
    if seed is not None:
        overrides['seed'] = seed
    if truncate_pct is not None:
        overrides['truncate_pct'] = truncate_pct
    if censoring is not None:
        overrides['censoring_mode'] = CLI_CENSORING[censoring]
    if overrides:
        config = config.with_analysis(**overrides)

    replicates = config.analysis.bootstrap_replicates
    console.print(f"[cyan]受试者: {len(dataset)}，模型: {config.analysis.model_kind.value}，"
                  f"删失权重: {config.analysis.censoring_mode.value}，bootstrap: {replicates}[/cyan]")

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TaskProgressColumn(),
        console=console,
        disable=replicates == 0,
    ) as progress:
        task = progress.add_task("[cyan]bootstrap...", total=max(replicates, 1))

        def update_progress(current, total):
            progress.update(task, completed=current, total=total)

        result = run_analysis(dataset, config, threads=threads, progress_callback=update_progress)

    console.print(coefficient_table(result.coefficients))
    console.print(decomposition_table(result.decomposition))
    console.print(diagnostics_table(result.fit.diagnostics))
    if result.bootstrap is not None and result.bootstrap.failed:
        console.print(f"[yellow]bootstrap 失败 {result.bootstrap.failed}/{result.bootstrap.requested} 次，已剔除[/yellow]")

    timing = {'total_seconds': time.perf_counter() - started} if record_timing else None
    write_report(build_report(config, dataset, result, timing), out)
    console.print(f"[green]报告已保存到: {out}[/green]")
    if weights_out:
        write_weights(result.weighted, weights_out)
        console.print(f"[green]权重已保存到: {weights_out}[/green]")


@cli.command()
@click.option('-f', '--fit', 'fit_path', required=True, help='fit 命令输出的报告 JSON')
@click.option('--contrast', required=True, callback=parse_contrast, help='对比 a,astar')
@click.option('-o', '--out', required=True, help='累积发生率 CSV (time, cause, cif, surv)')
def cuminc(fit_path: str, contrast: Tuple[int, int], out: str):
    """计算 (a, a*) 下的反事实累积发生率"""
    with stage("cuminc"):
        result = curves_from_report(load_report(fit_path), *contrast)
        write_curves(result, out)
    for cause, curve in sorted(result.curves.items()):
        console.print(f"[cyan]病因 {cause}: 随访结束时累积发生率 {curve.cif[-1]:.4f}[/cyan]")
    if result.rescaled:
        console.print(f"[yellow]{result.rescaled} 个时刻的总离散风险超过 1，已缩放[/yellow]")
    console.print(f"[green]曲线已保存到: {out}[/green]")


@cli.command()
@click.option('--dgp', required=True, help='DGP 配置 JSON')
@click.option('-n', '--n', 'n', type=click.IntRange(min=1), required=True, help='受试者数')
@click.option('-s', '--seed', type=click.IntRange(min=0), default=0, help='随机种子')
@click.option('-o', '--out', required=True, help='短格式输出 CSV')
def simulate(dgp: str, n: int, seed: int, out: str):
    """从 DGP 生成合成队列"""
    with stage("simulate"):
        dataset = generate(load_dgp(dgp), n, seed)
        write_dataset(dataset, out)
    statuses = [int(s.status) for s in dataset.subjects]
    console.print(f"[green]生成 {n} 个受试者 (病因 1: {statuses.count(1)}，病因 2: {statuses.count(2)}，"
                  f"删失: {statuses.count(0)}) -> {out}[/green]")


@cli.command()
@click.option('--dgp', required=True, help='DGP 配置 JSON')
@click.option('--contrast', multiple=True, callback=parse_contrast, help='对比 a,astar (可重复，默认 0,1)')
@click.option('-o', '--out', default=None, help='真值 JSON')
def oracle(dgp: str, contrast: Sequence[Tuple[int, int]], out: Optional[str]):
    """枚举计算真值风险比"""
    contrasts: List[Tuple[int, int]] = list(contrast) or [(0, 1)]
    with stage("oracle"):
        effects = oracle_true_hrs(load_dgp(dgp), contrasts)
    console.print(oracle_table(effects))
    if out:
        with open(out, 'w', encoding='utf-8') as f:
            f.write(dumps({'contrasts': [list(c) for c in contrasts],
                           'effects': [e.to_dict() for e in effects]}) + "\n")
        console.print(f"[green]真值已保存到: {out}[/green]")


def report_error(error: MedsurvError) -> None:
    if isinstance(error, ValidationFailed):
        Console(stderr=True).print(findings_table(error.findings))
    err_console.print(error.structured(), soft_wrap=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    主入口

    Args:
        argv: 命令行参数 (默认 sys.argv[1:])

    Returns:
        退出码
    """
    try:
        code = cli.main(args=list(argv) if argv is not None else None, prog_name="medsurv",
                        standalone_mode=False)
    except MedsurvError as e:
        report_error(e)
        return e.exit_code
    except click.exceptions.Abort:
        err_console.print("已取消")
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    return code if isinstance(code, int) else 0
