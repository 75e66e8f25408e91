"""Memory-augmented latent diffusion for blockwise long-video generation."""

from .codec import CodecConfig, LatentCodec, train_codec
from .diffusion import (
    KV_CACHE,
    LAST_ONLY,
    RECURRENT,
    DiffusionSchedule,
    MemoryBudgetError,
    TrainConfig,
    make_schedule,
    training_step,
)
from .model import MALTDenoiser, ModelConfig
from .sampling import ConfigurationError, generate_long_video, video_prediction

__all__ = [
    "CodecConfig", "LatentCodec", "train_codec", "KV_CACHE", "LAST_ONLY", "RECURRENT",
    "DiffusionSchedule", "MemoryBudgetError", "TrainConfig", "make_schedule", "training_step",
    "MALTDenoiser", "ModelConfig", "ConfigurationError", "generate_long_video", "video_prediction",
]
