"""Optimisation loop, schedules, run configuration and checkpoints."""

from .checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    CheckpointError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from .config import VARIANTS, ConfigError, TrainRunConfig, effective_lr, load_config, steps_per_epoch
from .loop import (
    RunResult,
    TrainingError,
    TrainState,
    batch_indices,
    embedding_std,
    encode_images,
    load_model,
    read_metrics,
    run_pretrain,
    train_step,
)
from .optim import LARS, NonFiniteGradientError, cosine_lr, lars_step, momentum_schedule, trust_ratio

__all__ = [
    "FORMAT_VERSION",
    "LARS",
    "MAGIC",
    "VARIANTS",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "NonFiniteGradientError",
    "RunResult",
    "TrainRunConfig",
    "TrainState",
    "TrainingError",
    "batch_indices",
    "cosine_lr",
    "effective_lr",
    "embedding_std",
    "encode_images",
    "from_bytes",
    "lars_step",
    "load_checkpoint",
    "load_config",
    "load_model",
    "momentum_schedule",
    "read_metrics",
    "run_pretrain",
    "save_checkpoint",
    "steps_per_epoch",
    "to_bytes",
    "train_step",
    "trust_ratio",
]
