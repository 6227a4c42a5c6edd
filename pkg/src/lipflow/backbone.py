"""Audio-to-video diffusion transformer.

Video latents are patchified per frame into tokens. Every block runs
self-attention over all frames, an optional full attention to a text token
bank, and a frame-level cross-attention in which the tokens of latent frame
``i`` only see speech latent frame ``i``. The per-frame noise level drives an
adaptive layer norm, so frames at different noise levels are modulated
independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    blocks: int = 4
    width: int = 128
    heads: int = 4
    patch: int = 2
    latent_channels: int = 8
    latent_hw: tuple[int, int] = (4, 4)
    audio_window: int = 2  # h_w of the speech latent
    audio_dim: int = 16  # d_A of the speech latent
    text_tokens: int = 0  # 0 disables the text branch
    text_dim: int = 32
    p_drop: float = 0.1
    mlp_ratio: float = 4.0
    zero_init_audio: bool = False

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        h, w = self.latent_hw
        if h % self.patch or w % self.patch:
            raise ValueError(f"patch {self.patch} does not divide latent size {self.latent_hw}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")

    @property
    def tokens_per_frame(self) -> int:
        h, w = self.latent_hw
        return (h // self.patch) * (w // self.patch)


@dataclass
class ConditionSet:
    """Conditions for one denoiser call. ``None`` means the null condition.

    ``speech``: ``(B, f, h_w, d_A)`` aligned with the non-reference frames.
    ``reference``: ``(B, h, w, c)`` latent of the reference image.
    ``speech_keep`` / ``reference_keep``: optional ``(B,)`` booleans for
    per-sample dropout inside a batch.
    """

    speech: torch.Tensor | None = None
    reference: torch.Tensor | None = None
    text: torch.Tensor | None = None
    speech_keep: torch.Tensor | None = None
    reference_keep: torch.Tensor | None = None


def patchify(z: torch.Tensor, patch: int) -> torch.Tensor:
    """``(..., f, h, w, c)`` -> ``(..., f, (h/p)(w/p), p*p*c)``."""
    *lead, f, h, w, c = z.shape
    if h % patch or w % patch:
        raise ShapeError(f"patch {patch} does not divide spatial size {(h, w)}")
    z = z.reshape(*lead, f, h // patch, patch, w // patch, patch, c)
    n = len(lead)
    perm = list(range(n)) + [n + i for i in (0, 1, 3, 2, 4, 5)]
    z = z.permute(*perm)
    return z.reshape(*lead, f, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: torch.Tensor, patch: int, hw: tuple[int, int]) -> torch.Tensor:
    *lead, f, s, pc = tokens.shape
    h, w = hw
    c = pc // (patch * patch)
    if s != (h // patch) * (w // patch) or pc != patch * patch * c:
        raise ShapeError(f"token grid {tuple(tokens.shape[-2:])} does not match size {hw} with patch {patch}")
    z = tokens.reshape(*lead, f, h // patch, w // patch, patch, patch, c)
    n = len(lead)
    perm = list(range(n)) + [n + i for i in (0, 1, 3, 2, 4, 5)]
    return z.permute(*perm).reshape(*lead, f, h, w, c)


def sinusoidal(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    args = x[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(kv_dim or dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor | None = None) -> torch.Tensor:
        ctx = x if ctx is None else ctx
        B, n, d = x.shape
        q = self.q(x).reshape(B, n, self.heads, -1).transpose(1, 2)
        k, v = self.kv(ctx).reshape(B, ctx.shape[1], 2, self.heads, -1).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(B, n, d))


class FrameCrossAttention(nn.Module):
    """Residual cross-attention where frame ``i`` queries only speech frame ``i``."""

    def __init__(self, dim: int, heads: int, zero_init: bool = False):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        if zero_init:
            nn.init.zeros_(self.attn.out.weight)
            nn.init.zeros_(self.attn.out.bias)

    def forward(self, h: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        # h: (B, f, S, d), c: (B, f, h_w, d)
        if h.shape[:2] != c.shape[:2]:
            raise ShapeError(f"frame count mismatch: hidden {tuple(h.shape[:2])} vs speech {tuple(c.shape[:2])}")
        B, f, S, d = h.shape
        y = self.attn(self.norm(h).reshape(B * f, S, d), c.reshape(B * f, c.shape[2], d))
        return h + y.reshape(B, f, S, d)


def frame_cross_attention(h: torch.Tensor, c: torch.Tensor, module: FrameCrossAttention) -> torch.Tensor:
    return module(h, c)


def modulate(x, shift, scale):
    return x * (1 + scale) + shift


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.width
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.self_attn = Attention(d, cfg.heads)
        self.text_attn = None
        if cfg.text_tokens:
            self.text_norm = nn.LayerNorm(d)
            self.text_attn = Attention(d, cfg.heads)
        self.audio = FrameCrossAttention(d, cfg.heads, cfg.zero_init_audio)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        hidden = int(d * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, d))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))

    def forward(self, x, temb, audio, text):
        # x: (B, T, S, d); temb: (B, T, d), one embedding per frame
        B, T, S, d = x.shape
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(temb)[:, :, None].chunk(6, dim=-1)
        h = modulate(self.norm1(x), sh1, sc1)
        x = x + g1 * self.self_attn(h.reshape(B, T * S, d)).reshape(B, T, S, d)
        if self.text_attn is not None:
            x = x + self.text_attn(self.text_norm(x).reshape(B, T * S, d), text).reshape(B, T, S, d)
        # reference slot (frame 0) has no speech frame
        x = torch.cat([x[:, :1], self.audio(x[:, 1:], audio)], dim=1)
        h = modulate(self.norm2(x), sh2, sc2)
        return x + g2 * self.mlp(h)


class A2VDiT(nn.Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        d, p, c = cfg.width, cfg.patch, cfg.latent_channels
        S = cfg.tokens_per_frame
        self.embed = nn.Linear(p * p * c, d)
        self.t_embed = nn.Sequential(nn.Linear(256, d), nn.SiLU(), nn.Linear(d, d))
        self.audio_embed = nn.Linear(cfg.audio_dim, d)
        self.audio_pos = nn.Parameter(torch.randn(cfg.audio_window, d) * 0.02)
        self.null_audio = nn.Parameter(torch.randn(cfg.audio_window, d) * 0.02)
        self.null_reference = nn.Parameter(torch.randn(S, d) * 0.02)
        self.reference_tag = nn.Parameter(torch.zeros(d))
        if cfg.text_tokens:
            self.text_bank = nn.Parameter(torch.randn(cfg.text_tokens, d) * 0.02)
            self.text_proj = nn.Linear(cfg.text_dim, d)
        self.blocks = nn.ModuleList([Block(cfg) for _ in range(cfg.blocks)])
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.final = nn.Linear(d, p * p * c)
        # adaLN-Zero: every block starts as the identity and the output as zero
        for blk in self.blocks:
            nn.init.zeros_(blk.ada[-1].weight)
            nn.init.zeros_(blk.ada[-1].bias)
        for m in (self.final_ada[-1], self.final):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)
        gh, gw = cfg.latent_hw[0] // p, cfg.latent_hw[1] // p
        yy, xx = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
        pos = torch.cat([sinusoidal(yy.flatten().float(), d // 2), sinusoidal(xx.flatten().float(), d // 2)], -1)
        self.register_buffer("spatial_pos", pos, persistent=False)

    def _speech_tokens(self, cond: ConditionSet, B: int, f: int, dtype) -> torch.Tensor:
        null = self.null_audio.expand(B, f, -1, -1)
        if cond.speech is None:
            return null
        s = cond.speech
        if s.shape[:2] != (B, f) or s.shape[2:] != (self.cfg.audio_window, self.cfg.audio_dim):
            raise ShapeError(
                f"speech latent {tuple(s.shape)} does not match batch {B}, {f} frames, "
                f"window {self.cfg.audio_window}, dim {self.cfg.audio_dim}"
            )
        tok = self.audio_embed(s.to(dtype)) + self.audio_pos
        if cond.speech_keep is not None:
            tok = torch.where(cond.speech_keep.reshape(B, 1, 1, 1), tok, null)
        return tok

    def forward(self, z_t: torch.Tensor, cond: ConditionSet, t_vec: torch.Tensor) -> torch.Tensor:
        """Velocity prediction, same shape as ``z_t`` ``(B, f+1, h, w, c)``.

        Slot 0 holds the reference frame; its output is meaningless.
        """
        cfg = self.cfg
        if z_t.ndim != 5 or tuple(z_t.shape[2:4]) != tuple(cfg.latent_hw) or z_t.shape[-1] != cfg.latent_channels:
            raise ShapeError(f"latent {tuple(z_t.shape)} does not match config {cfg.latent_hw}x{cfg.latent_channels}")
        B, T = z_t.shape[:2]
        if t_vec.shape != (B, T):
            raise ShapeError(f"t_vec shape {tuple(t_vec.shape)} != {(B, T)}")
        if T < 2:
            raise ShapeError("need the reference slot plus at least one frame")
        if not (torch.isfinite(z_t).all() and torch.isfinite(t_vec).all()):
            raise ValueError("non-finite denoiser input")
        if (t_vec[:, 0] != 0).any():
            raise ValueError("reference slot must have noise level 0")

        x = self.embed(patchify(z_t, cfg.patch))  # (B, T, S, d)
        if cond.reference is not None:
            ref = self.embed(patchify(cond.reference.to(z_t.dtype)[:, None], cfg.patch))[:, 0]
            if cond.reference_keep is not None:
                ref = torch.where(cond.reference_keep.reshape(B, 1, 1), ref, self.null_reference.expand_as(ref))
        else:
            ref = self.null_reference.expand(B, -1, -1)
        x = torch.cat([ref[:, None] + self.reference_tag, x[:, 1:]], dim=1)
        x = x + self.spatial_pos.to(x.dtype)
        x = x + sinusoidal(torch.arange(T, dtype=x.dtype, device=x.device), cfg.width)[None, :, None]

        temb = self.t_embed(sinusoidal(t_vec.to(x.dtype) * 1000.0, 256))
        audio = self._speech_tokens(cond, B, T - 1, x.dtype)
        text = None
        if cfg.text_tokens:
            text = self.text_bank.expand(B, -1, -1) if cond.text is None else self.text_proj(cond.text.to(x.dtype))
        for blk in self.blocks:
            x = blk(x, temb, audio, text)
        shift, scale = self.final_ada(temb)[:, :, None].chunk(2, dim=-1)
        out = self.final(modulate(self.final_norm(x), shift, scale))
        return unpatchify(out, cfg.patch, cfg.latent_hw)


def condition_dropout(cond: ConditionSet, p_drop: float, rng: np.random.Generator) -> ConditionSet:
    """Independently null the speech and reference conditions with probability ``p_drop``."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must lie in [0, 1]")
    drop_speech = rng.random() < p_drop
    drop_ref = rng.random() < p_drop
    return replace(
        cond,
        speech=None if drop_speech else cond.speech,
        reference=None if drop_ref else cond.reference,
    )


def dropout_masks(batch: int, p_drop: float, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample keep masks for speech and reference."""
    keep = torch.rand(2, batch, generator=gen) >= p_drop
    return keep[0], keep[1]
