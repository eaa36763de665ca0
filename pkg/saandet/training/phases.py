"""Base training, novel fine-tuning and the plain-detector baselines

Every phase runs the same loop: episodes of one query image plus one support crop per active class, the standard
two-stage detection losses, SGD. Phases differ in their class list, query images, support pool and learning rate.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence

import torch
from structlog.stdlib import get_logger

from saandet.data.episodes import SupportPool, finetune_pool, phase_one_pool
from saandet.data.loader import EpisodeDataset, episode_loader
from saandet.data.splits import sample_finetune_set
from saandet.exceptions import ConfigError
from saandet.models.config import RunConfig
from saandet.models.dataset import DatasetIndex, FinetuneSet, Phase, ShotBudget, SplitSpec
from saandet.saan import FewShotDetector
from saandet.settings import config_hash
from saandet.training.checkpoint import Checkpoint, CheckpointMeta, CheckpointPhase, save_checkpoint
from saandet.training.trainer import EpisodeLog, LossLog, Trainer
from saandet.utils.seeding import derive_seed, seed_everything

logger = get_logger(__name__)

BaselineMode = Literal["joint", "ft"]


@dataclass(frozen=True)
class TrainingData:
    index: DatasetIndex
    split: SplitSpec
    image_root: Path


def finetune_set_for(data: TrainingData, budget: ShotBudget, config: RunConfig) -> FinetuneSet:
    seed = derive_seed(config.seed, "finetune-set", budget.k, budget.rho_label)
    return sample_finetune_set(data.index, data.split, budget, seed=seed, allow_masking=config.data.allow_masking)


def method_name(fusion: str, two_phase: bool = True) -> str:
    if fusion == "gru":
        return "saan"
    if fusion == "xcorr":
        return "xcorr"
    return "frcn-ft" if two_phase else "frcn-joint"


def _run_phase(
    model: FewShotDetector,
    data: TrainingData,
    phase: Phase,
    query_images: Sequence[str],
    support_pool: SupportPool,
    config: RunConfig,
    lr: float,
    output_dir: Optional[Path],
    finetune_set: Optional[FinetuneSet] = None,
) -> int:
    steps = config.train.steps
    dataset = EpisodeDataset(
        data.index,
        data.split,
        phase,
        query_images,
        support_pool,
        model.class_ids,
        config,
        data.image_root,
        steps=steps * config.train.batch_size,
        finetune_set=finetune_set,
        with_supports=model.uses_supports,
    )
    loader = episode_loader(dataset, config.train.batch_size, config.data.workers, config.data.prefetch)
    generator = torch.Generator().manual_seed(derive_seed(config.seed, "roi-sampling", phase))
    trainer = Trainer(
        model,
        lr=lr,
        steps=steps,
        momentum=config.train.momentum,
        weight_decay=config.train.weight_decay,
        milestones=config.train.milestones,
        gamma=config.train.gamma,
        warmup_steps=config.train.warmup_steps,
        grad_clip=config.train.grad_clip,
        log_every=config.train.log_every,
        generator=generator,
        snapshot_dir=output_dir,
    )
    context = {"phase": phase, "config_hash": config_hash(config), "seed": config.seed}
    trainer.attach(LossLog(output_dir / "loss_log.jsonl" if output_dir else None, context))
    trainer.attach(EpisodeLog(output_dir / "episodes.jsonl" if output_dir else None))
    logger.info("training phase started", phase=phase, steps=steps, lr=lr, queries=len(query_images))
    records = trainer.fit(loader)
    logger.info("training phase finished", phase=phase, final_loss=records[-1].total if records else None)
    return len(records)


def _finish(
    model: FewShotDetector,
    phase: CheckpointPhase,
    method: str,
    novel: Sequence[str],
    data: TrainingData,
    config: RunConfig,
    steps: int,
    output_dir: Optional[Path],
    budget: Optional[ShotBudget] = None,
) -> Checkpoint:
    model.eval()
    meta = CheckpointMeta(
        phase=phase,
        method=method,
        classes=model.class_names,
        novel_classes=tuple(novel),
        feature_dim=model.detector.feature_dim,
        fusion=model.fusion,
        detector=config.detector,
        config_hash=config_hash(config),
        seed=config.seed,
        steps=steps,
        split_id=data.split.split_id,
        budget=budget,
    )
    checkpoint = Checkpoint(model=model, meta=meta)
    if output_dir is not None:
        save_checkpoint(checkpoint, output_dir / "checkpoint")
    return checkpoint


def train_base(data: TrainingData, config: RunConfig, output_dir: Optional[Path] = None) -> Checkpoint:
    """Phase 1: base classes only, on training images free of novel objects"""
    base = data.index.sort_classes(data.split.classes.base)
    seed_everything(derive_seed(config.seed, "init", "base"))
    model = FewShotDetector(config.detector, base, config.fusion)
    steps = _run_phase(
        model,
        data,
        "base",
        data.split.base_train_images,
        phase_one_pool(data.index, data.split),
        config,
        config.base_lr,
        output_dir,
    )
    return _finish(model, "base", method_name(config.fusion), (), data, config, steps, output_dir)


def finetune_novel(
    checkpoint: Checkpoint,
    data: TrainingData,
    finetune_set: FinetuneSet,
    config: RunConfig,
    output_dir: Optional[Path] = None,
) -> Checkpoint:
    """Phase 2: widen the head by the novel classes and train on the budgeted fine-tuning set

    The phase-1 checkpoint itself is left untouched.
    """
    if checkpoint.meta.phase != "base":
        raise ConfigError(f"fine-tuning starts from a base checkpoint, got phase '{checkpoint.meta.phase}'")
    novel = data.index.sort_classes(data.split.classes.novel)
    seed_everything(derive_seed(config.seed, "init", "finetune"))
    model = copy.deepcopy(checkpoint.model)
    model.add_classes(novel, torch.Generator().manual_seed(derive_seed(config.seed, "head-expansion")))
    steps = _run_phase(
        model,
        data,
        "finetune",
        finetune_set.images,
        finetune_pool(data.index, finetune_set, data.split),
        config,
        config.base_lr * config.train.finetune_lr_factor,
        output_dir,
        finetune_set,
    )
    return _finish(
        model, "finetune", checkpoint.meta.method, novel, data, config, steps, output_dir, finetune_set.budget
    )


def train_joint(
    data: TrainingData, finetune_set: FinetuneSet, config: RunConfig, output_dir: Optional[Path] = None
) -> Checkpoint:
    """Single phase over base and novel classes together"""
    base = data.index.sort_classes(data.split.classes.base)
    novel = data.index.sort_classes(data.split.classes.novel)
    seed_everything(derive_seed(config.seed, "init", "joint"))
    model = FewShotDetector(config.detector, base + novel, config.fusion)
    steps = _run_phase(
        model,
        data,
        "joint",
        finetune_set.images,
        finetune_pool(data.index, finetune_set, data.split),
        config,
        config.base_lr,
        output_dir,
        finetune_set,
    )
    return _finish(
        model, "joint", method_name(config.fusion, False), novel, data, config, steps, output_dir, finetune_set.budget
    )


def train_baseline(
    data: TrainingData,
    budget: ShotBudget,
    mode: BaselineMode,
    config: RunConfig,
    output_dir: Optional[Path] = None,
) -> Checkpoint:
    """Plain two-stage detector baselines

    ``joint`` trains once on every base annotation plus ``k`` annotations per novel class; ``ft`` is base training
    followed by fine-tuning, both without fusion.
    """
    config = config.model_copy(update={"fusion": "none"})
    if mode == "joint":
        joint_budget = ShotBudget(k=budget.k, rho=None)
        return train_joint(data, finetune_set_for(data, joint_budget, config), config, output_dir)
    if mode == "ft":
        base = train_base(data, config, output_dir / "base" if output_dir else None)
        finetune_set = finetune_set_for(data, budget, config)
        return finetune_novel(base, data, finetune_set, config, output_dir / "finetune" if output_dir else None)
    raise ConfigError(f"unknown baseline mode {mode!r}")
