# app/api/commands.py
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from app.config import settings
from app.models.errors import InvalidArgumentError, RefCompError
from app.models.geometry import PointCloud
from app.models.schemas import METRIC_SCALES, ReferenceManifest, TrainConfig
from app.services.checkpoint import load_checkpoint
from app.services.corpus import SHAPE_CLASSES, generate_corpus
from app.services.metrics import evaluate
from app.services.refdata import build_manifest, load_manifest, load_pairs
from app.services.storage import SUFFIXES, CloudStore, atomic_write, read_cloud, write_cloud
from app.services.trainer import RefCompTrainer, infer, load_network, load_training_items
from app.services.verification import SUITES, run_suites

logger = logging.getLogger(__name__)

cli = typer.Typer(help="RefComp 桌面规模无配对点云补全", no_args_is_help=True, add_completion=False)
console = Console()

SCOPES = {"same-class": "same-class", "all": "all-classes", "all-classes": "all-classes"}


@contextmanager
def handle_errors(action: str):
    """用户错误退出码 1，内部错误退出码 2"""
    try:
        yield
    except typer.Exit:
        raise
    except (RefCompError, ValidationError) as e:
        logger.error(f"{action}失败: {e}")
        console.print(f"[red]{action}失败:[/red] {e}")
        raise typer.Exit(code=1)
    except Exception as e:
        logger.exception(f"{action}出现内部错误: {e}")
        console.print(f"[red]{action}出现内部错误:[/red] {e}")
        raise typer.Exit(code=2)


def _split(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _existing(path: Path, what: str) -> Path:
    if not Path(path).is_dir():
        raise InvalidArgumentError(f"{what}目录不存在: {path}")
    return Path(path)


def _load_dir(path: Path, what: str) -> Dict[str, PointCloud]:
    return {sid: cloud for sid, (_, cloud) in CloudStore(_existing(path, what)).load_all().items()}


@cli.command("gen-corpus")
def gen_corpus(
        classes: str = typer.Option(",".join(SHAPE_CLASSES), help="形状类别，逗号分隔"),
        per_class: int = typer.Option(50, help="每类形状数（桌面默认 50，共 200 个）"),
        points: int = typer.Option(2048, help="完整点云点数（完整规模默认 2048）"),
        partial_points: int = typer.Option(1024, help="部分视角点数（完整规模默认 1024）"),
        seed: int = typer.Option(0, help="随机种子"),
        out: Path = typer.Option(Path("corpus"), help="输出目录，包含 complete/ 与 partial/"),
        fmt: str = typer.Option(settings.cloud_format, "--format", help="点云文件格式 pcb 或 xyz"),
):
    """生成程序化形状语料"""
    with handle_errors("生成语料"):
        if fmt not in SUFFIXES:
            raise InvalidArgumentError(f"未知点云格式: {fmt}")
        written = generate_corpus(_split(classes), per_class, n_points=points, seed=seed, out_dir=out,
                                  partial_size=partial_points, fmt=fmt)
        console.print(f"已生成 {len(written['complete'])} 个完整点云与 {len(written['partial'])} 个部分点云 -> {out}")


def _train_config(config: Optional[Path], preset: str, **overrides) -> TrainConfig:
    """配置文件优先，否则按预设 desk / full 构造"""
    if config is not None:
        return TrainConfig.from_file(config, **overrides)
    if preset == "full":
        return TrainConfig.full_scale(**overrides)
    if preset == "desk":
        return TrainConfig(**overrides)
    raise InvalidArgumentError(f"未知预设: {preset}")


@cli.command("build-refs")
def build_refs(
        targets: Path = typer.Option(..., help="目标部分点云目录"),
        corpus: Path = typer.Option(..., help="完整点云语料目录"),
        k: Optional[int] = typer.Option(None, help="退化时每个模板点的近邻数，默认取配置 degrade_k_ref（15）"),
        top_n: Optional[int] = typer.Option(None, help="每个目标保留的参考对数，默认取配置 top_n_refs（3）"),
        min_cd: Optional[float] = typer.Option(None, help="最小 CD 阈值，原始单位，默认取配置 min_cd（1e-4，×10⁴ 报告时为 1.0）"),
        scope: Optional[str] = typer.Option(None, help="检索范围 same-class 或 all，默认按模式: unified 为 all，其余为 same-class"),
        mode: Optional[str] = typer.Option(None, help="plain / wdis / unified，决定默认检索范围"),
        config: Optional[Path] = typer.Option(None, help="与 train 共用的 key = value 配置文件"),
        preset: str = typer.Option("desk", help="无配置文件时的预设 desk 或 full"),
        out: Path = typer.Option(Path("refs.tsv"), help="参考清单输出路径"),
        seed: int = typer.Option(0, help="退化随机种子"),
        fmt: str = typer.Option(settings.cloud_format, "--format", help="退化点云文件格式"),
):
    """为每个目标检索 top-N 参考对并写出清单"""
    with handle_errors("构建参考对"):
        if scope is not None and scope not in SCOPES:
            raise InvalidArgumentError(f"未知检索范围: {scope}")
        train_config = _train_config(config, preset, **({"mode": mode} if mode is not None else {}))
        target_clouds = CloudStore(_existing(targets, "目标")).load_all()
        corpus_clouds = CloudStore(_existing(corpus, "语料")).load_all()
        manifest = build_manifest(
            target_clouds, corpus_clouds, out,
            k=train_config.degrade_k_ref if k is None else k,
            top_n=train_config.top_n_refs if top_n is None else top_n,
            min_cd=train_config.min_cd if min_cd is None else min_cd,
            class_scope=train_config.class_scope if scope is None else SCOPES[scope],
            seed=seed, fmt=fmt)
        console.print(f"参考清单已写出: {out} ({len(manifest.rows())} 行, {len(manifest.targets())} 个目标)")


@cli.command()
def train(
        refs: Path = typer.Option(..., help="参考清单 (build-refs 的输出)"),
        out: Path = typer.Option(Path("runs/refcomp"), help="检查点与训练日志目录"),
        config: Optional[Path] = typer.Option(None, help="key = value 配置文件，键见 docs/config_keys.md"),
        mode: Optional[str] = typer.Option(None, help="plain / wdis / unified（默认 plain）"),
        preset: str = typer.Option("desk", help="无配置文件时的预设: desk（30 epoch, batch 8）或 full（600 epoch, batch 50）"),
        fixed_ref: bool = typer.Option(False, "--fixed-ref", help="消融: 始终使用排名第一的参考对"),
        only_gan: bool = typer.Option(False, "--only-gan", help="消融: 仅用对抗损失训练"),
        no_share: bool = typer.Option(False, "--no-share", help="消融: 参考分支与目标分支不共享参数"),
        resume: Optional[Path] = typer.Option(None, help="从检查点恢复训练"),
        max_steps: Optional[int] = typer.Option(None, help="最多训练步数"),
        seed: Optional[int] = typer.Option(None, help="覆盖配置中的随机种子"),
):
    """训练 RefComp（学习率 5e-4，权重 α=0.35 β=0.65 γ=0.001）"""
    with handle_errors("训练"):
        overrides = {key: value for key, value in (("mode", mode), ("max_steps", max_steps), ("seed", seed))
                     if value is not None}
        for flag, enabled in (("fixed_ref", fixed_ref), ("only_gan", only_gan), ("no_share", no_share)):
            if enabled:
                overrides[flag] = True
        train_config = _train_config(config, preset, **overrides)

        items = load_training_items(load_manifest(refs), train_config)
        trainer = RefCompTrainer(train_config)
        checkpoint = trainer.train(items, out, resume=resume)
        last = trainer.rows[-1].split("\t") if trainer.rows else None
        summary = f"训练完成: {checkpoint.step} 步 -> {out}"
        if last:
            summary += f"，最后一步总损失 {float(last[8]):.6g}"
        console.print(summary)


def _find_target(manifest: ReferenceManifest, path: Path) -> str:
    wanted = Path(path).resolve()
    for target in manifest.targets():
        if manifest.resolve(target).resolve() == wanted:
            return target
    raise InvalidArgumentError(f"输入 {path} 不在参考清单中")


@cli.command()
def complete(
        ckpt: Path = typer.Option(..., help="检查点文件"),
        input_path: Path = typer.Option(..., "--input", help="部分点云文件或目录"),
        refs: Path = typer.Option(..., help="参考清单，使用排名第一的参考对"),
        out: Path = typer.Option(..., help="输出点云文件；输入为目录时为输出目录"),
):
    """用训练好的模型补全部分点云（输出 2048 点）"""
    with handle_errors("补全"):
        manifest = load_manifest(refs)
        if input_path.is_dir():
            sources = sorted(p for p in input_path.iterdir()
                             if p.suffix.lower() in SUFFIXES.values() and not p.name.startswith("."))
            jobs = [(p, Path(out) / p.name) for p in sources]
        else:
            jobs = [(input_path, Path(out))]
        targets = [(src, dst, _find_target(manifest, src)) for src, dst in jobs]
        checkpoint = load_checkpoint(ckpt)
        network, seed = load_network(checkpoint), checkpoint.config().seed

        def _complete(job):
            src, _, target = job
            return infer(network, read_cloud(src), load_pairs(manifest, target)[0], seed, target)

        # 全部补全成功后才落盘
        with ThreadPoolExecutor(max_workers=max(1, settings.threads)) as pool:
            clouds = list(pool.map(_complete, targets))
        written: List[Path] = []
        try:
            for (_, dst, _), cloud in zip(targets, clouds):
                written.append(write_cloud(dst, cloud))
        except Exception:
            for path in written:
                path.unlink(missing_ok=True)
            raise
        console.print(f"已补全 {len(written)} 个点云 -> {out}")


@cli.command("eval")
def evaluate_command(
        pred: Path = typer.Option(..., help="补全结果目录"),
        gt: Path = typer.Option(..., help="真值完整点云目录"),
        metrics: str = typer.Option("cd,ucd,f1,mmd", help="指标列表 (cd/ucd/f1/mmd)"),
        epsilon: float = typer.Option(0.03, help="F1 距离阈值（完整规模默认 ε=0.03）"),
        partials: Optional[Path] = typer.Option(None, help="部分输入目录，计算 UCD 时必需"),
        per_item: Optional[Path] = typer.Option(None, help="逐样本结果 TSV 输出路径"),
        out: Path = typer.Option(Path("report.tsv"), help="汇总报告 TSV 输出路径"),
):
    """评估补全结果；表格值 CD/UCD/MMD ×10⁴，F1 ×10²"""
    with handle_errors("评估"):
        names = _split(metrics)
        reports = evaluate(_load_dir(pred, "预测"), _load_dir(gt, "真值"), names,
                           partials=_load_dir(partials, "部分输入") if partials is not None else None,
                           epsilon=epsilon)
        with atomic_write(out, binary=False) as handle:
            handle.write("metric\traw\tscaled\n")
            for report in reports:
                handle.write(f"{report.name}\t{report.value:.17g}\t{report.scaled:.17g}\n")
        if per_item is not None:
            with atomic_write(per_item, binary=False) as handle:
                handle.write("item\tmetric\traw\tscaled\n")
                for report in reports:
                    for item, value in report.per_item or []:
                        handle.write(f"{item}\t{report.name}\t{value:.17g}\t{value * report.scale_factor:.17g}\n")

        table = Table(title="评估结果")
        table.add_column("指标")
        table.add_column("原始值", justify="right")
        table.add_column("表格值", justify="right")
        for report in reports:
            table.add_row(report.name, f"{report.value:.6g}", f"{report.scaled:.4f} (×{METRIC_SCALES[report.name]:g})")
        console.print(table)


@cli.command()
def verify(
        suite: str = typer.Option("all", help="gradcheck / oracle / invariants / all"),
        seed: int = typer.Option(0, help="随机种子"),
):
    """运行自检套件，全部通过才返回 0，否则返回 2"""
    with handle_errors("自检"):
        names = list(SUITES) if suite == "all" else [suite]
        unknown = [name for name in names if name not in SUITES]
        if unknown:
            raise InvalidArgumentError(f"未知自检套件: {', '.join(unknown)}")
        results = run_suites(names, seed)

    table = Table(title=f"自检结果 (seed={seed})")
    for column in ("套件", "检查项", "结果", "说明", "耗时"):
        table.add_column(column)
    for result in results:
        status = "[green]通过[/green]" if result.passed else "[red]失败[/red]"
        table.add_row(result.suite, result.name, status, result.detail, f"{result.seconds:.2f}s")
    console.print(table)
    failed = [r for r in results if not r.passed]
    if failed:
        console.print(f"[red]{len(failed)} 项检查失败[/red]")
        raise typer.Exit(code=2)
    console.print(f"[green]全部 {len(results)} 项检查通过[/green]")
