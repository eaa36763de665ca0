from saandet.training.checkpoint import Checkpoint, CheckpointMeta, load_checkpoint, save_checkpoint
from saandet.training.losses import LossRecord, LossTerms, compute_losses
from saandet.training.phases import (
    TrainingData,
    finetune_novel,
    finetune_set_for,
    train_base,
    train_baseline,
    train_joint,
)
from saandet.training.trainer import EpisodeLog, LossLog, Trainer

__all__ = [
    "Checkpoint",
    "CheckpointMeta",
    "EpisodeLog",
    "LossLog",
    "LossRecord",
    "LossTerms",
    "Trainer",
    "TrainingData",
    "compute_losses",
    "finetune_novel",
    "finetune_set_for",
    "load_checkpoint",
    "save_checkpoint",
    "train_base",
    "train_baseline",
    "train_joint",
]
