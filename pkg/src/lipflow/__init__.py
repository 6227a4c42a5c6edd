"""Audio-driven talking-face generation with asynchronous flow-matching noise.

A toy, desk-scale implementation: a small causal video codec, a speech
autoencoder, a diffusion transformer with frame-level audio attention, and a
multi-clip sampler whose clips overlap by one latent frame.
"""

from .ans import SamplerConfig, generate, generate_concat, make_schedule, segment_clips
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import CodecConfig, LatentVideo, ShapeError, VideoCodec, decode_latents, encode_video
from .pipeline import ExperimentConfig, System, desk_config, generate_video, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CodecConfig",
    "ExperimentConfig",
    "LatentVideo",
    "SamplerConfig",
    "ShapeError",
    "System",
    "VideoCodec",
    "decode_latents",
    "desk_config",
    "encode_video",
    "generate",
    "generate_concat",
    "generate_video",
    "load_checkpoint",
    "make_schedule",
    "save_checkpoint",
    "segment_clips",
    "train_stage1",
    "train_stage2",
]
