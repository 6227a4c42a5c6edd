"""Toy temporal video autoencoder.

Pixel video ``(F, H, W, D_v)`` is compressed to latents ``(f, h, w, d_v)``
with ``f = 1 + (F - 1) / r_t`` and ``h = H / r_s``. The first pixel frame
maps alone to latent frame 0 and every later latent frame covers ``r_t``
pixel frames; the temporal layers are causal so a latent frame never sees
pixel frames after the ones it covers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._layers import CausalConv1d, CausalUpsample1d, as_tensor, check_finite

log = logging.getLogger(__name__)

PIXEL_OFFSET = 0.5


class ShapeError(ValueError):
    """Raised when a tensor's size is incompatible with the compression ratios."""


@dataclass(frozen=True)
class CodecConfig:
    spatial_ratio: int = 8
    temporal_ratio: int = 8
    pixel_channels: int = 3
    latent_channels: int = 8
    hidden: int = 64

    def __post_init__(self):
        for name in ("spatial_ratio", "temporal_ratio", "pixel_channels", "latent_channels", "hidden"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")


@dataclass
class LatentVideo:
    """Latent frames ``(f, h, w, d_v)``; ``has_reference`` marks index 0 as z_R."""

    data: torch.Tensor
    has_reference: bool = False

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def with_reference(self, z_ref: torch.Tensor) -> "LatentVideo":
        if self.has_reference:
            raise ValueError("latent already carries a reference frame")
        z_ref = z_ref.reshape(1, *self.data.shape[1:]).to(self.data)
        return LatentVideo(torch.cat([z_ref, self.data], dim=0), has_reference=True)

    def strip_reference(self) -> "LatentVideo":
        if not self.has_reference:
            return self
        return LatentVideo(self.data[1:], has_reference=False)


def compression_shape(F_: int, H: int, W: int, cfg: CodecConfig) -> tuple[int, int, int]:
    """Latent ``(f, h, w)`` for a pixel clip of ``F_`` frames at ``H x W``."""
    if F_ < 1:
        raise ShapeError(f"frames: need at least one frame, got {F_}")
    if (F_ - 1) % cfg.temporal_ratio:
        raise ShapeError(
            f"frames: F-1={F_ - 1} is not divisible by temporal ratio {cfg.temporal_ratio}"
        )
    if H % cfg.spatial_ratio:
        raise ShapeError(f"height: {H} is not divisible by spatial ratio {cfg.spatial_ratio}")
    if W % cfg.spatial_ratio:
        raise ShapeError(f"width: {W} is not divisible by spatial ratio {cfg.spatial_ratio}")
    return 1 + (F_ - 1) // cfg.temporal_ratio, H // cfg.spatial_ratio, W // cfg.spatial_ratio


def pixel_frame_count(f: int, cfg: CodecConfig) -> int:
    return 1 + (f - 1) * cfg.temporal_ratio


class VideoCodec(nn.Module):
    """Deterministic autoencoder: space-to-depth patches mixed at cell
    resolution, plus strided causal convolutions in time."""

    def __init__(self, cfg: CodecConfig = CodecConfig()):
        super().__init__()
        self.cfg = cfg
        c, hid, rs, rt = cfg.pixel_channels, cfg.hidden, cfg.spatial_ratio, cfg.temporal_ratio
        patch = c * rs * rs
        self.enc_spatial = nn.Sequential(
            nn.PixelUnshuffle(rs),
            nn.Conv2d(patch, hid, 1),
            nn.GELU(),
            nn.Conv2d(hid, hid, 3, padding=1),
        )
        self.enc_time = CausalConv1d(hid, hid, rt, stride=rt)
        self.enc_out = nn.Conv1d(hid, cfg.latent_channels, 1)

        self.dec_in = nn.Conv1d(cfg.latent_channels, hid, 1)
        self.dec_time = CausalUpsample1d(hid, hid, rt)
        self.dec_spatial = nn.Sequential(
            nn.Conv2d(hid, hid, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hid, patch, 1),
            nn.PixelShuffle(rs),
        )
        # per-channel latent normalisation, fitted after training
        self.register_buffer("latent_mean", torch.zeros(cfg.latent_channels))
        self.register_buffer("latent_std", torch.ones(cfg.latent_channels))

    # batched internals: x (B, F, H, W, C) -> z (B, f, h, w, d)
    def encode_raw(self, x: torch.Tensor) -> torch.Tensor:
        B, Fr, H, W, C = x.shape
        f, h, w = compression_shape(Fr, H, W, self.cfg)
        # centred pixels condition the optimisation far better than [0, 1]
        y = self.enc_spatial(x.reshape(B * Fr, H, W, C).permute(0, 3, 1, 2) - PIXEL_OFFSET)
        hid = y.shape[1]
        # (B*F, hid, h, w) -> (B*h*w, hid, F)
        y = y.reshape(B, Fr, hid, h, w).permute(0, 3, 4, 2, 1).reshape(B * h * w, hid, Fr)
        y = self.enc_out(F.gelu(self.enc_time(y)))
        return y.reshape(B, h, w, -1, f).permute(0, 4, 1, 2, 3)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        B, f, h, w, d = z.shape
        y = z.permute(0, 2, 3, 4, 1).reshape(B * h * w, d, f)
        y = F.gelu(self.dec_time(F.gelu(self.dec_in(y))))
        Fr = y.shape[-1]
        hid = y.shape[1]
        y = y.reshape(B, h, w, hid, Fr).permute(0, 4, 3, 1, 2).reshape(B * Fr, hid, h, w)
        y = self.dec_spatial(y) + PIXEL_OFFSET
        return y.permute(0, 2, 3, 1).reshape(B, Fr, *y.shape[2:], y.shape[1])

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return (self.encode_raw(x) - self.latent_mean) / self.latent_std

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z * self.latent_std + self.latent_mean)

    @torch.no_grad()
    def fit_latent_stats(self, videos: torch.Tensor, batch: int = 8) -> None:
        zs = torch.cat([self.encode_raw(videos[i:i + batch]) for i in range(0, len(videos), batch)])
        flat = zs.reshape(-1, zs.shape[-1])
        self.latent_mean.copy_(flat.mean(0))
        self.latent_std.copy_(flat.std(0).clamp_min(1e-6))


def _check_video(x: torch.Tensor, cfg: CodecConfig) -> None:
    if x.ndim != 4:
        raise ShapeError(f"video must be (F, H, W, C), got shape {tuple(x.shape)}")
    if x.shape[-1] != cfg.pixel_channels:
        raise ShapeError(f"channels: expected {cfg.pixel_channels}, got {x.shape[-1]}")
    compression_shape(x.shape[0], x.shape[1], x.shape[2], cfg)
    check_finite(x, "video")


@torch.no_grad()
def encode_video(x, codec: VideoCodec) -> LatentVideo:
    """Encode one pixel clip ``(F, H, W, C)`` into a :class:`LatentVideo`.

    A single reference image is encoded as a one-frame clip.
    """
    p = next(codec.parameters())
    x = as_tensor(x).to(p.dtype)
    _check_video(x, codec.cfg)
    return LatentVideo(codec.encode(x[None])[0], has_reference=False)


@torch.no_grad()
def decode_latents(z: LatentVideo, codec: VideoCodec) -> np.ndarray:
    if z.has_reference:
        raise ValueError("strip the reference frame before decoding")
    data = z.data
    if data.ndim != 4 or data.shape[-1] != codec.cfg.latent_channels:
        raise ShapeError(
            f"latent must be (f, h, w, {codec.cfg.latent_channels}), got {tuple(data.shape)}"
        )
    p = next(codec.parameters())
    out = codec.decode(data.to(p.dtype)[None])[0]
    return out.clamp(0.0, 1.0).cpu().numpy()


def _windows(videos: torch.Tensor, window: int, rt: int, gen: torch.Generator) -> torch.Tensor:
    """One random latent-aligned window per clip, in a random clip order."""
    n, Fr = videos.shape[:2]
    window = min(window, Fr)
    starts = torch.randint(0, (Fr - window) // rt + 1, (n,), generator=gen) * rt
    order = torch.randperm(n, generator=gen)
    return torch.stack([videos[i, o:o + window] for i, o in zip(order.tolist(), starts[order].tolist())])


def train_codec(
    dataset,
    epochs: int,
    lr: float = 3e-3,
    cfg: CodecConfig = CodecConfig(),
    batch_size: int = 16,
    seed: int = 0,
    codec: VideoCodec | None = None,
    window: int = 17,
    windows_per_clip: int = 4,
) -> tuple[VideoCodec, list[float]]:
    """Fit the codec with mean-squared reconstruction loss.

    ``dataset`` is an array ``(n, F, H, W, C)``. Each epoch draws
    ``windows_per_clip`` random windows of ``window`` frames from every clip,
    starting on latent boundaries; short windows buy many more optimiser
    steps than whole clips for the same compute. Returns the model and the
    per-epoch mean loss. With ``epochs=0`` the freshly initialised model is
    returned untouched.
    """
    videos = as_tensor(np.asarray(dataset) if not isinstance(dataset, torch.Tensor) else dataset)
    if videos.ndim != 5 or len(videos) == 0:
        raise ValueError("dataset must be a non-empty array of shape (n, F, H, W, C)")
    _check_video(videos[0], cfg)
    if (window - 1) % cfg.temporal_ratio:
        raise ShapeError(f"frames: window {window} does not map onto whole latent frames")

    torch.manual_seed(seed)
    if codec is None:
        codec = VideoCodec(cfg)
    if epochs == 0:
        return codec, []

    per_epoch = windows_per_clip * -(-len(videos) // batch_size)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs * per_epoch)
    gen = torch.Generator().manual_seed(seed)
    curve = []
    codec.train()
    for epoch in range(epochs):
        total, count = 0.0, 0
        for _ in range(windows_per_clip):
            clips = _windows(videos, window, cfg.temporal_ratio, gen)
            for i in range(0, len(clips), batch_size):
                x = clips[i:i + batch_size]
                loss = F.mse_loss(codec.decode_raw(codec.encode_raw(x)), x)
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"codec loss became {loss.item()} at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total += loss.item() * len(x)
                count += len(x)
        curve.append(total / count)
        log.info("codec epoch %d loss %.5f", epoch, curve[-1])
    codec.eval()
    codec.fit_latent_stats(videos)
    return codec, curve
