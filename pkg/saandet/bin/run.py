from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path
from typing import Any, Callable, NoReturn, Optional, Sequence

import numpy as np
from PIL import Image
from pydantic import ValidationError
from structlog.contextvars import bind_contextvars, clear_contextvars
from structlog.stdlib import get_logger

from saandet.data.episodes import finetune_pool, phase_one_pool
from saandet.data.formats import (
    image_root_for,
    parse_annotations,
    read_index,
    read_split,
    write_index,
    write_records,
    write_split,
)
from saandet.data.loader import ImageStore, Normalizer, SupportCropper
from saandet.data.synthetic import SyntheticConfig, generate_synthetic_dataset
from saandet.evaluation.grid import (
    GRID_NAMES,
    GridResult,
    plan_grid,
    protocol_split,
    run_experiment_grid,
    write_grid,
)
from saandet.evaluation.render import render_report
from saandet.evaluation.report import evaluate, read_reports
from saandet.exceptions import AnnotationParseError, ConfigError, DataError, RuntimeFailure, SaanError
from saandet.models.config import RunConfig
from saandet.models.dataset import FinetuneSet, ShotBudget
from saandet.settings import config_hash, import_settings
from saandet.training.checkpoint import Checkpoint, load_checkpoint
from saandet.training.phases import TrainingData, finetune_novel, finetune_set_for, train_base, train_joint
from saandet.utils.io import atomic_write_text
from saandet.utils.logging import configure_logging

logger = get_logger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise ConfigError(f"{self.prog}: {message}")


def _set(overrides: dict[str, Any], dotted: str, value: Any) -> None:
    if value is None:
        return
    node = overrides
    *parents, leaf = dotted.split(".")
    for part in parents:
        node = node.setdefault(part, {})
    node[leaf] = value


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for attr, dotted in (
        ("seed", "seed"),
        ("loglevel", "loglevel"),
        ("output", "output_dir"),
        ("fusion", "fusion"),
        ("k", "budget.k"),
        ("rho", "budget.rho"),
        ("steps", "train.steps"),
        ("lr", "train.lr"),
        ("phase", "train.phase"),
        ("format", "data.format"),
        ("root", "data.root"),
        ("iou", "eval.iou_threshold"),
        ("ap_variant", "eval.ap_variant"),
    ):
        _set(overrides, dotted, getattr(args, attr, None))
    if getattr(args, "no_mask", False):
        _set(overrides, "data.allow_masking", False)
    if getattr(args, "detector", None):
        overrides["detector"] = {"size": args.detector}
    if getattr(args, "novel", None):
        _set(overrides, "data.novel", list(args.novel))
    if getattr(args, "exclude", None):
        _set(overrides, "data.exclude_classes", list(args.exclude))
    return overrides


def _finetune_manifest(output_dir: Path, budget: ShotBudget) -> Path:
    return output_dir / f"finetune_k{budget.k}_rho{budget.rho_label}.json"


def load_prepared(directory: Path) -> TrainingData:
    """Index, image root and split written by ``prepare``"""
    index, header = read_index(directory / "index.tsv")
    split_path = directory / "split.tsv"
    if not split_path.is_file():
        raise DataError(f"{split_path} is missing, run 'prepare' first")
    split, _ = read_split(split_path)
    return TrainingData(index=index, split=split, image_root=image_root_for(directory / "index.tsv", header))


def load_finetune_set(directory: Path, data: TrainingData, budget: ShotBudget, config: RunConfig) -> FinetuneSet:
    path = _finetune_manifest(directory, budget)
    if path.is_file():
        try:
            return FinetuneSet.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise DataError(f"unreadable fine-tuning manifest {path}: {e}") from e
    return finetune_set_for(data, budget, config)


def cmd_prepare(args: argparse.Namespace, config: RunConfig) -> int:
    if config.data.root is None:
        raise ConfigError("prepare needs a dataset root (--root or data.root)")
    if not config.data.novel:
        raise ConfigError("prepare needs at least one novel class (--novel or data.novel)")
    out = config.output_dir
    errors: list[AnnotationParseError] = []
    index = parse_annotations(config.data.root, config.data.format, errors)
    if config.data.format == "canonical":
        source = config.data.root if config.data.root.is_file() else config.data.root / "index.tsv"
        image_root = image_root_for(source, read_index(source)[1])
    else:
        image_root = config.data.root
    header = {"root": Path(image_root).resolve(), "config_hash": config_hash(config), "seed": config.seed}
    write_index(out / "index.tsv", index, header=header)

    split = protocol_split(index, config.data.novel, config)
    budget = {"k": config.budget.k, "rho": config.budget.rho_label}
    write_split(out / "split.tsv", split, header={**header, **budget, "phase": "base"})
    data = TrainingData(index=index, split=split, image_root=Path(image_root))
    finetune_set = finetune_set_for(data, config.budget, config)
    manifest = _finetune_manifest(out, config.budget)
    atomic_write_text(manifest, finetune_set.model_dump_json(indent=2) + "\n")
    write_records(
        manifest.with_suffix(".tsv"),
        index,
        finetune_set.images,
        header={**header, **budget, "phase": "finetune"},
        masked=finetune_set.masked,
    )
    logger.info(
        "dataset prepared",
        output=str(out),
        parse_errors=len(errors),
        finetune_images=len(finetune_set.images),
        counts=finetune_set.counts,
    )
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    prepared = Path(args.prepared)
    data = load_prepared(prepared)
    out = config.output_dir
    phase = config.train.phase
    if phase == "base":
        checkpoint = train_base(data, config, out / "base")
    elif phase == "finetune":
        base_path = Path(args.checkpoint) if args.checkpoint else out / "base" / "checkpoint"
        base = load_checkpoint(base_path)
        finetune_set = load_finetune_set(prepared, data, config.budget, config)
        checkpoint = finetune_novel(base, data, finetune_set, config, out / "finetune")
    else:
        finetune_set = load_finetune_set(prepared, data, ShotBudget(k=config.budget.k, rho=None), config)
        checkpoint = train_joint(data, finetune_set, config, out / "joint")
    logger.info("training finished", phase=phase, method=checkpoint.meta.method, checkpoint=str(checkpoint.path))
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    out = config.output_dir
    prepared = Path(args.prepared)
    data = load_prepared(prepared)
    if args.grid:
        cells = plan_grid(args.grid, data.index, config)
        result = run_experiment_grid(data.index, data.image_root, cells, config, out)
    elif args.checkpoint:
        checkpoint: Checkpoint = load_checkpoint(args.checkpoint)
        finetune_set = None
        if checkpoint.meta.budget is not None:
            finetune_set = load_finetune_set(prepared, data, checkpoint.meta.budget, config)
        result = GridResult(reports=[evaluate(checkpoint, data, finetune_set, config)])
        write_grid(result, out)
    else:
        raise ConfigError("eval needs --checkpoint or --grid")
    if args.render and result.reports:
        render_report(result.reports, out / "figures", data.index, data.image_root)
    if not result.reports:
        raise DataError(f"every grid cell failed, see {out / 'failures.jsonl'}")
    return 0


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    synth = SyntheticConfig(classes=args.classes, images=args.images, image_size=args.image_size, seed=config.seed)
    generate_synthetic_dataset(synth, config.output_dir)
    return 0


def cmd_crop_supports(args: argparse.Namespace, config: RunConfig) -> int:
    prepared = Path(args.prepared)
    data = load_prepared(prepared)
    if args.pool == "base":
        pool = phase_one_pool(data.index, data.split)
    else:
        pool = finetune_pool(data.index, load_finetune_set(prepared, data, config.budget, config))
    cropper = SupportCropper(
        ImageStore(data.index, data.image_root),
        Normalizer((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
        config.support.size,
        config.support.interpolation,
    )
    out = config.output_dir / "supports"
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for class_name in sorted(pool):
        for ann_id in pool[class_name]:
            pixels = cropper.crop(ann_id).pixels.clamp(0, 1).permute(1, 2, 0).numpy()
            name = re.sub(r"[^A-Za-z0-9_.-]+", "_", f"support_{class_name}_{ann_id}")
            Image.fromarray(np.round(pixels * 255).astype(np.uint8)).save(out / f"{name}.png", format="PNG")
            written += 1
    logger.info("support crops written", output=str(out), crops=written)
    return 0


def cmd_report(args: argparse.Namespace, config: RunConfig) -> int:
    reports = read_reports(args.reports)
    index, image_root = None, None
    if args.prepared:
        data = load_prepared(Path(args.prepared))
        index, image_root = data.index, data.image_root
    render_report(reports, config.output_dir / "figures", index, image_root)
    return 0


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output", help="output directory (default: $SAAN_OUTPUT_ROOT or output_dir)")
    parser.add_argument("--loglevel")


def _no_mask(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--no-mask", dest="no_mask", action="store_true", help="take whole images only, never mask surplus objects"
    )


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="saandet", description="Few-shot object detection with self-adaptive attention")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    prepare = commands.add_parser("prepare", help="build the canonical index and split manifests")
    _common(prepare)
    prepare.add_argument("--root", type=Path)
    prepare.add_argument("--format", choices=("voc", "nwpu", "canonical"))
    prepare.add_argument("--novel", action="append")
    prepare.add_argument("--exclude", action="append")
    prepare.add_argument("--k", type=int)
    prepare.add_argument("--rho")
    _no_mask(prepare)
    prepare.set_defaults(handler=cmd_prepare)

    train = commands.add_parser("train", help="run one training phase")
    _common(train)
    train.add_argument("--prepared", required=True, help="directory written by 'prepare'")
    train.add_argument("--phase", choices=("base", "finetune", "joint"))
    train.add_argument("--fusion", choices=("gru", "xcorr", "none"))
    train.add_argument("--detector", choices=("tiny", "full"))
    train.add_argument("--steps", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--k", type=int)
    train.add_argument("--rho")
    _no_mask(train)
    train.add_argument("--checkpoint", help="base checkpoint to fine-tune")
    train.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="evaluate a checkpoint or run an experiment grid")
    _common(ev)
    ev.add_argument("--prepared", required=True)
    ev.add_argument("--checkpoint")
    ev.add_argument("--grid", choices=GRID_NAMES)
    ev.add_argument("--novel", action="append")
    ev.add_argument("--exclude", action="append")
    ev.add_argument("--detector", choices=("tiny", "full"))
    ev.add_argument("--fusion", choices=("gru", "xcorr", "none"))
    ev.add_argument("--steps", type=int)
    ev.add_argument("--k", type=int)
    ev.add_argument("--rho")
    _no_mask(ev)
    ev.add_argument("--iou", type=float)
    ev.add_argument("--ap-variant", dest="ap_variant", choices=("all_point", "11_point"))
    ev.add_argument("--render", action="store_true")
    ev.set_defaults(handler=cmd_eval)

    synth = commands.add_parser("synth", help="generate the synthetic shapes dataset")
    _common(synth)
    synth.add_argument("--classes", type=int, default=3)
    synth.add_argument("--images", type=int, default=120)
    synth.add_argument("--image-size", dest="image_size", type=int, default=128)
    synth.set_defaults(handler=cmd_synth)

    crops = commands.add_parser("crop-supports", help="dump support crops as PNG files")
    _common(crops)
    crops.add_argument("--prepared", required=True)
    crops.add_argument("--pool", choices=("base", "finetune"), default="finetune")
    crops.add_argument("--k", type=int)
    crops.add_argument("--rho")
    _no_mask(crops)
    crops.set_defaults(handler=cmd_crop_supports)

    report = commands.add_parser("report", help="re-render figures from a saved reports file")
    _common(report)
    report.add_argument("--reports", required=True, type=Path)
    report.add_argument("--prepared", help="prepared directory, enables detection overlays")
    report.set_defaults(handler=cmd_report)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, configure and dispatch; returns the process exit code"""
    configure_logging({"LOGLEVEL": os.environ.get("SAAN_LOGLEVEL", "INFO")})
    clear_contextvars()
    try:
        args = build_parser().parse_args(argv)
        config, _ = import_settings(args.config, _overrides(args))
        configure_logging({"LOGLEVEL": config.loglevel, "LOGFILE": config.output_dir / "logs" / f"{args.command}.log"})
        bind_contextvars(command=args.command, config_hash=config_hash(config), seed=config.seed)
        handler: Callable[[argparse.Namespace, RunConfig], int] = args.handler
        return handler(args, config)
    except SaanError as e:
        logger.error("command failed", error=str(e), kind=type(e).__name__, exit_code=e.exit_code)
        return e.exit_code
    except ValidationError as e:
        logger.error("invalid arguments", error=str(e))
        return ConfigError.exit_code
    except Exception as e:
        logger.exception("unexpected failure", error=str(e), kind=type(e).__name__, exit_code=RuntimeFailure.exit_code)
        return RuntimeFailure.exit_code


def main() -> None:
    sys.exit(run())
