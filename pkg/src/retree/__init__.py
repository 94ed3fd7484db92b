"""Two-stage diffusion synthesis of retinal vessel trees and fundus images,
scaled to run on a CPU."""

from .diffusion import DiffusionProcess, p_sample_step, q_sample, q_step
from .errors import ConfigError, DataError, NumericError, RetreeError
from .networks import Denoiser, DenoiserConfig, Discriminator, RRDBNet, SegUNet, build_denoiser
from .schedules import NoiseSchedule, ScheduleConfig, cosine_schedule, linear_schedule
from .training import TrainConfig, fit, load_checkpoint, load_model, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "Denoiser", "DenoiserConfig", "DiffusionProcess", "Discriminator",
    "NoiseSchedule", "NumericError", "RRDBNet", "RetreeError", "ScheduleConfig", "SegUNet", "TrainConfig",
    "build_denoiser", "cosine_schedule", "fit", "linear_schedule", "load_checkpoint", "load_model",
    "p_sample_step", "q_sample", "q_step", "save_checkpoint",
]
