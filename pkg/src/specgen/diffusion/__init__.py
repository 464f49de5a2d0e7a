"""DDPM schedules, losses, sampling, bound evaluation, EMA, and training."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ddpm import (
    DiffusionConfig,
    VARIANCE_MODES,
    discretized_gaussian_log_likelihood,
    gaussian_kl,
    p_sample_step,
    predicted_mean,
    q_posterior,
    q_sample,
    sample_loop,
    simple_loss,
    split_model_output,
    vlb_terms,
)
from .ema import EmaState, ema_update, init_ema
from .schedule import NoiseSchedule, ScheduleError, from_betas, make_linear_schedule
from .train import (
    TraceRow,
    TrainDivergence,
    TrainResult,
    TrainSettings,
    cosine_lr,
    split_validation,
    train,
    training_loss,
    validation_loss,
    write_trace,
)

__all__ = [
    "CheckpointError",
    "DiffusionConfig",
    "EmaState",
    "NoiseSchedule",
    "ScheduleError",
    "TraceRow",
    "TrainDivergence",
    "TrainResult",
    "TrainSettings",
    "VARIANCE_MODES",
    "cosine_lr",
    "discretized_gaussian_log_likelihood",
    "ema_update",
    "from_betas",
    "gaussian_kl",
    "init_ema",
    "load_checkpoint",
    "make_linear_schedule",
    "p_sample_step",
    "predicted_mean",
    "q_posterior",
    "q_sample",
    "sample_loop",
    "save_checkpoint",
    "simple_loss",
    "split_model_output",
    "split_validation",
    "train",
    "training_loss",
    "validation_loss",
    "vlb_terms",
    "write_trace",
]
