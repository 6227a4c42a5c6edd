"""Speech autoencoder that compresses per-frame speech features in time by
the same causal ratio as the video codec, plus its pretraining losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._layers import CausalConv1d, CausalUpsample1d, as_tensor, causal_frame_count, check_finite
from .codec import ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpeechAEConfig:
    window: int = 2  # H_w
    dim: int = 32  # D_A
    latent_window: int = 2  # h_w
    latent_dim: int = 16  # d_A
    temporal_ratio: int = 8
    kernel: int = 8
    hidden: int = 128
    tau: float = 0.1
    alpha_loss: float = 1.0
    beta_loss: float = 0.1
    standard_infonce: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha_loss < 0 or self.beta_loss < 0:
            raise ValueError("loss weights must be non-negative")
        if self.kernel < self.temporal_ratio:
            raise ValueError("kernel must be at least the temporal ratio")


class SpeechAE(nn.Module):
    def __init__(self, cfg: SpeechAEConfig = SpeechAEConfig()):
        super().__init__()
        self.cfg = cfg
        hid = cfg.hidden
        self.enc_in = nn.Linear(cfg.window * cfg.dim, hid)
        self.enc_down = CausalConv1d(hid, hid, cfg.kernel, stride=cfg.temporal_ratio)
        self.enc_mix = CausalConv1d(hid, hid, 3)
        self.enc_out = nn.Linear(hid, cfg.latent_window * cfg.latent_dim)

        self.dec_in = nn.Linear(cfg.latent_window * cfg.latent_dim, hid)
        self.dec_mix = CausalConv1d(hid, hid, 3)
        self.dec_up = CausalUpsample1d(hid, hid, cfg.temporal_ratio)
        self.dec_out = nn.Linear(hid, cfg.window * cfg.dim)
        # per-dimension latent standardisation, identity until fitted
        self.register_buffer("latent_mean", torch.zeros(cfg.latent_window, cfg.latent_dim))
        self.register_buffer("latent_std", torch.ones(cfg.latent_window, cfg.latent_dim))

    def _check(self, s: torch.Tensor) -> None:
        c = self.cfg
        if s.ndim != 4 or s.shape[2:] != (c.window, c.dim):
            raise ShapeError(f"speech features must be (B, F, {c.window}, {c.dim}), got {tuple(s.shape)}")
        if (s.shape[1] - 1) % c.temporal_ratio:
            raise ShapeError(f"frames: F-1={s.shape[1] - 1} is not divisible by {c.temporal_ratio}")

    def encode(self, s: torch.Tensor) -> torch.Tensor:
        """(B, F, H_w, D_A) -> (B, f, h_w, d_A)"""
        self._check(s)
        B, Fr = s.shape[:2]
        y = F.gelu(self.enc_in(s.reshape(B, Fr, -1))).transpose(1, 2)
        y = F.gelu(self.enc_down(y))
        y = F.gelu(self.enc_mix(y)).transpose(1, 2)
        c = self.enc_out(y).reshape(B, y.shape[1], self.cfg.latent_window, self.cfg.latent_dim)
        return (c - self.latent_mean) / self.latent_std

    def decode(self, c: torch.Tensor) -> torch.Tensor:
        """(B, f, h_w, d_A) -> (B, F, H_w, D_A)"""
        cfg = self.cfg
        if c.ndim != 4 or c.shape[2:] != (cfg.latent_window, cfg.latent_dim):
            raise ShapeError(
                f"speech latent must be (B, f, {cfg.latent_window}, {cfg.latent_dim}), got {tuple(c.shape)}"
            )
        c = c * self.latent_std + self.latent_mean
        B, f = c.shape[:2]
        y = F.gelu(self.dec_in(c.reshape(B, f, -1))).transpose(1, 2)
        y = F.gelu(self.dec_mix(y))
        y = F.gelu(self.dec_up(y)).transpose(1, 2)
        return self.dec_out(y).reshape(B, y.shape[1], cfg.window, cfg.dim)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(s))

    @torch.no_grad()
    def fit_latent_stats(self, features: torch.Tensor, batch: int = 16) -> None:
        """Standardise latents to zero mean and unit variance per dimension on ``features``.

        Reconstructions are unchanged; only the latent coordinates move.
        """
        self.latent_mean.zero_()
        self.latent_std.fill_(1.0)
        cs = torch.cat([self.encode(features[i:i + batch]) for i in range(0, len(features), batch)])
        flat = cs.reshape(-1, *cs.shape[2:])
        self.latent_mean.copy_(flat.mean(0))
        self.latent_std.copy_(flat.std(0).clamp_min(1e-6))


def _params_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def encode_speech(s, model: SpeechAE) -> torch.Tensor:
    """Encode one feature sequence ``(F, H_w, D_A)`` to ``(f, h_w, d_A)``."""
    s = as_tensor(s).to(_params_dtype(model))
    if s.ndim != 3:
        raise ShapeError(f"expected (F, H_w, D_A), got {tuple(s.shape)}")
    check_finite(s, "speech features")
    with torch.no_grad():
        return model.encode(s[None])[0]


def decode_speech(c, model: SpeechAE) -> torch.Tensor:
    c = as_tensor(c).to(_params_dtype(model))
    if c.ndim != 3:
        raise ShapeError(f"expected (f, h_w, d_A), got {tuple(c.shape)}")
    with torch.no_grad():
        return model.decode(c[None])[0]


def loss_mse(s: torch.Tensor, s_hat: torch.Tensor) -> torch.Tensor:
    if s.shape != s_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    return ((s - s_hat) ** 2).mean()


def frame_similarity(s: torch.Tensor, s_hat: torch.Tensor) -> torch.Tensor:
    """Cosine similarity ``sim[..., i, j] = cos(s_hat_i, s_j)`` over flattened frames."""
    a = s_hat.flatten(start_dim=s_hat.ndim - 2) if s_hat.ndim >= 3 else s_hat
    b = s.flatten(start_dim=s.ndim - 2) if s.ndim >= 3 else s
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity undefined for a zero-norm frame")
    return (a / na) @ (b / nb).transpose(-1, -2)


def loss_contrastive(s: torch.Tensor, s_hat: torch.Tensor, tau: float, standard: bool = False) -> torch.Tensor:
    """Frame-level contrastive loss between original and reconstructed features.

    ``s`` is ``(F, H_w, D_A)`` or batched ``(B, F, H_w, D_A)``. By default the
    denominator sums over ``j != i`` only, so the value can be negative;
    ``standard=True`` includes the positive pair (usual InfoNCE).
    """
    if s.shape != s_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = s.shape[-3] if s.ndim >= 3 else s.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least two frames")
    logits = frame_similarity(s, s_hat) / tau
    pos = torch.diagonal(logits, dim1=-2, dim2=-1)
    if not standard:
        eye = torch.eye(n, dtype=torch.bool, device=logits.device)
        logits = logits.masked_fill(eye, float("-inf"))
    return (torch.logsumexp(logits, dim=-1) - pos).mean()


def loss_speechae(s: torch.Tensor, s_hat: torch.Tensor, cfg: SpeechAEConfig) -> torch.Tensor:
    total = s.new_zeros(())
    if cfg.alpha_loss:
        total = total + cfg.alpha_loss * loss_mse(s, s_hat)
    if cfg.beta_loss:
        total = total + cfg.beta_loss * loss_contrastive(s, s_hat, cfg.tau, cfg.standard_infonce)
    return total


def pretrain_speechae(
    features,
    cfg: SpeechAEConfig = SpeechAEConfig(),
    lr: float = 1e-4,
    epochs: int = 30,
    seed: int = 0,
    batch_size: int = 1,
) -> tuple[SpeechAE, list[float]]:
    """Self-supervised pretraining on a stack of feature sequences ``(n, F, H_w, D_A)``.

    Returns the model and the per-epoch mean of the combined loss.
    """
    feats = as_tensor(np.asarray(features) if not isinstance(features, torch.Tensor) else features)
    if feats.ndim != 4 or len(feats) == 0:
        raise ValueError("features must be a non-empty array (n, F, H_w, D_A)")
    torch.manual_seed(seed)
    model = SpeechAE(cfg)
    if epochs == 0:
        return model, []
    model._check(feats[:1])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    curve = []
    for epoch in range(epochs):
        order = torch.randperm(len(feats), generator=gen)
        total = 0.0
        for i in range(0, len(feats), batch_size):
            s = feats[order[i:i + batch_size]]
            loss = loss_speechae(s, model(s), cfg)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"speechae loss became {loss.item()} at epoch {epoch}, batch {i}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(s)
        curve.append(total / len(feats))
        log.info("speechae epoch %d loss %.5f", epoch, curve[-1])
    model.eval()
    model.fit_latent_stats(feats.to(_params_dtype(model)))
    return model, curve


def frame_discrimination(model: SpeechAE, features) -> tuple[float, float]:
    """Mean positive and mean cross-frame cosine similarity on held-out clips."""
    s = as_tensor(features).to(_params_dtype(model))
    with torch.no_grad():
        sim = frame_similarity(s, model(s))
    n = sim.shape[-1]
    eye = torch.eye(n, dtype=torch.bool)
    pos = torch.diagonal(sim, dim1=-2, dim2=-1).mean().item()
    neg = sim.masked_select(~eye.expand_as(sim)).mean().item()
    return pos, neg


__all__ = [
    "SpeechAE",
    "SpeechAEConfig",
    "causal_frame_count",
    "decode_speech",
    "encode_speech",
    "frame_discrimination",
    "loss_contrastive",
    "loss_mse",
    "loss_speechae",
    "pretrain_speechae",
]
