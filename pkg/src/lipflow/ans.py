"""Asynchronous flow-matching noise scheduling.

Training adds noise at different levels per latent frame: the reference
slot stays clean, the first (motion) frame gets a lower level ``t1`` and the
remaining frames a higher level ``t2``. Inference splits a long latent
sequence into clips that overlap by one frame and walks a shared time
schedule; from the second clip on, the overlap frame is taken from the
previous clip, which has already advanced one level, so it guides the rest
of the clip.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .codec import LatentVideo, ShapeError

# denoiser(z_clip (f+1,h,w,c), speech (f,h_w,d_A) | None, reference (h,w,c) | None, t_vec (f+1,)) -> v
Denoiser = Callable[[torch.Tensor, Optional[torch.Tensor], Optional[torch.Tensor], torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class SamplerConfig:
    mu: float = 0.0
    sigma: float = 1.0
    shift: float = 1.0
    cfg_mode: str = "split"  # "joint", "split" or "none"
    alpha: float = 2.0
    beta: float = 6.0
    steps: int = 8
    drop_reference_in_uncond: bool = True
    schedule_shift: float | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.shift <= 0:
            raise ValueError("shift must be > 0")
        if self.steps < 2:
            raise ValueError("need at least 2 schedule levels")
        if self.cfg_mode not in ("joint", "split", "none"):
            raise ValueError(f"unknown cfg mode {self.cfg_mode!r}")


@dataclass(frozen=True)
class ClipPlan:
    n_frames: int
    clip_frames: int
    n_clips: int
    ranges: tuple[tuple[int, int], ...]  # 0-based [start, stop) over non-reference frames


def shift_time(u, s: float):
    return s * u / (1 + (s - 1) * u)


def sample_async_timesteps(mu: float, sigma: float, s: float, rng: np.random.Generator) -> tuple[float, float]:
    """Two noise levels from the shifted logit-normal, returned sorted."""
    if sigma < 0 or s <= 0:
        raise ValueError("need sigma >= 0 and shift > 0")
    u = 1.0 / (1.0 + np.exp(-(mu + sigma * rng.standard_normal(2))))
    t = shift_time(u, s)
    return float(min(t)), float(max(t))


def sample_async_timesteps_batch(n: int, mu: float, sigma: float, s: float, gen: torch.Generator,
                                 dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    u = torch.sigmoid(mu + sigma * torch.randn(n, 2, generator=gen, dtype=torch.float64))
    t = shift_time(u, s).sort(dim=1).values.to(dtype)
    return t[:, 0], t[:, 1]


def build_train_tvec(f: int, t1, t2, mode: str = "step") -> torch.Tensor:
    """Noise levels ``[0, t1, t2, ..., t2]`` for a clip of ``f`` frames plus reference.

    ``mode="interpolated"`` ramps linearly from ``t1`` to ``t2`` instead.
    ``t1``/``t2`` may be scalars or ``(B,)`` tensors; the result is ``(f+1,)``
    or ``(B, f+1)``.
    """
    if f < 2:
        raise ValueError("need f >= 2")
    t1 = torch.as_tensor(t1, dtype=torch.float64) if not isinstance(t1, torch.Tensor) else t1
    t2 = torch.as_tensor(t2, dtype=t1.dtype) if not isinstance(t2, torch.Tensor) else t2.to(t1.dtype)
    if (t1 < 0).any() or (t2 > 1).any() or (t1 > t2).any():
        raise ValueError(f"need 0 <= t1 <= t2 <= 1, got t1={t1}, t2={t2}")
    t1, t2 = t1[..., None], t2[..., None]
    if mode == "step":
        rest = t2.expand(*t2.shape[:-1], f - 1)
    elif mode == "interpolated":
        w = torch.linspace(0, 1, f, dtype=t1.dtype)[1:]
        rest = t1 + (t2 - t1) * w
    else:
        raise ValueError(f"unknown t-vector mode {mode!r}")
    return torch.cat([torch.zeros_like(t1), t1, rest], dim=-1)


def _bcast(t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    # (..., T) -> (..., T, 1, 1, 1)
    return t.to(z.dtype).reshape(*t.shape, *([1] * (z.ndim - t.ndim)))


def _check_tvec(t_vec: torch.Tensor, z: torch.Tensor) -> None:
    if t_vec.shape != z.shape[: t_vec.ndim] or t_vec.ndim == 0:
        raise ShapeError(f"t_vec {tuple(t_vec.shape)} does not match latent {tuple(z.shape)}")
    if (t_vec < 0).any() or (t_vec > 1).any():
        raise ValueError("noise levels must lie in [0, 1]")
    if (t_vec[..., 0] != 0).any():
        raise ValueError("reference slot must have noise level 0")


def add_noise_async(z0: torch.Tensor, t_vec: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Per-frame linear path ``(1 - t_i) z0_i + t_i eps_i``; slot 0 is returned as is.

    ``eps`` may cover all frames or only the non-reference ones.
    """
    _check_tvec(t_vec, z0)
    if eps.shape != z0.shape:
        if eps.shape[:-4] + (eps.shape[-4] + 1,) + eps.shape[-3:] != z0.shape:
            raise ShapeError(f"noise {tuple(eps.shape)} does not match latent {tuple(z0.shape)}")
        eps = torch.cat([torch.zeros_like(z0[..., :1, :, :, :]), eps], dim=-4)
    t = _bcast(t_vec, z0)
    zt = (1 - t) * z0 + t * eps
    zt[..., 0, :, :, :] = z0[..., 0, :, :, :]
    return zt


def fm_target(z0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise ShapeError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    return eps - z0


def fm_loss(v_hat: torch.Tensor, v: torch.Tensor, frame_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the frames where ``frame_mask`` is true.

    ``frame_mask`` is ``(T,)`` or ``(B, T)`` over the frame axis of ``v``.
    """
    if v_hat.shape != v.shape:
        raise ShapeError(f"shape mismatch {tuple(v_hat.shape)} vs {tuple(v.shape)}")
    mask = frame_mask.to(torch.bool).expand(v.shape[: v.ndim - 3])
    if not mask.any():
        raise ValueError("frame mask selects no frames")
    err = ((v_hat - v) ** 2).mean(dim=(-3, -2, -1))
    return err[mask].mean()


def euler_update(z: torch.Tensor, v_hat: torch.Tensor, t_from: torch.Tensor, t_to: torch.Tensor) -> torch.Tensor:
    """One Euler step of the ODE, per frame from ``t_from`` to ``t_to``."""
    if z.shape != v_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(z.shape)} vs {tuple(v_hat.shape)}")
    _check_tvec(t_from, z)
    _check_tvec(t_to, z)
    if (t_to > t_from).any():
        raise ValueError("t_to must not exceed t_from")
    out = z + _bcast(t_to - t_from, z) * v_hat
    out[..., 0, :, :, :] = z[..., 0, :, :, :]
    return out


def segment_clips(n_frames: int, clip_frames: int) -> ClipPlan:
    f = clip_frames
    if f < 2:
        raise ValueError("clips need at least 2 frames")
    k, rem = divmod(n_frames - 1, f - 1)
    if n_frames < f or rem:
        k_up = max(1, -(-(n_frames - 1) // (f - 1)))
        raise ValueError(
            f"{n_frames} latent frames cannot be split into clips of {f} with one-frame overlap; "
            f"nearest valid length is {k_up * (f - 1) + 1}"
        )
    ranges = tuple((j * (f - 1), j * (f - 1) + f) for j in range(k))
    return ClipPlan(n_frames, f, k, ranges)


def valid_length(n_frames: int, clip_frames: int) -> int:
    """Smallest length ``>= n_frames`` of the form ``k (f - 1) + 1``."""
    k = max(1, -(-(n_frames - 1) // (clip_frames - 1)))
    return k * (clip_frames - 1) + 1


def make_schedule(n: int, shift: float | None = None, dtype=torch.float64) -> torch.Tensor:
    """Uniform levels ``1 = T_1 > ... > T_n = 0``, optionally shifted."""
    if n < 2:
        raise ValueError("need at least 2 levels")
    t = torch.linspace(1.0, 0.0, n, dtype=dtype)
    if shift is not None:
        t = shift_time(t, shift)
    return t


def check_schedule(schedule: torch.Tensor) -> None:
    if schedule.ndim != 1 or len(schedule) < 2:
        raise ValueError("schedule must be a 1-D sequence of at least 2 levels")
    if schedule[0] != 1 or schedule[-1] != 0 or not (schedule[1:] < schedule[:-1]).all():
        raise ValueError("schedule must start at 1, end at 0 and strictly decrease")


def cfg_joint(v_uncond: torch.Tensor, v_cond: torch.Tensor, alpha: float) -> torch.Tensor:
    if v_uncond.shape != v_cond.shape:
        raise ShapeError("CFG branches differ in shape")
    return (1 - alpha) * v_uncond + alpha * v_cond


def cfg_split(v_uncond: torch.Tensor, v_ref: torch.Tensor, v_full: torch.Tensor, alpha: float, beta: float) -> torch.Tensor:
    if not (v_uncond.shape == v_ref.shape == v_full.shape):
        raise ShapeError("CFG branches differ in shape")
    return (1 - alpha - beta) * v_uncond + alpha * v_ref + beta * v_full


def guided_velocity(denoiser: Denoiser, z: torch.Tensor, speech, reference, t_vec, cfg: SamplerConfig) -> torch.Tensor:
    uncond_ref = None if cfg.drop_reference_in_uncond else reference
    if cfg.cfg_mode == "none":
        return denoiser(z, speech, reference, t_vec)
    if cfg.cfg_mode == "joint":
        return cfg_joint(denoiser(z, None, uncond_ref, t_vec), denoiser(z, speech, reference, t_vec), cfg.alpha)
    return cfg_split(
        denoiser(z, None, uncond_ref, t_vec),
        denoiser(z, None, reference, t_vec),
        denoiser(z, speech, reference, t_vec),
        cfg.alpha,
        cfg.beta,
    )


def calls_per_clip_step(cfg: SamplerConfig) -> int:
    return {"none": 1, "joint": 2, "split": 3}[cfg.cfg_mode]


def digest(x: torch.Tensor) -> str:
    return hashlib.sha1(x.detach().cpu().contiguous().numpy().tobytes()).hexdigest()[:16]


@dataclass
class ClipEvent:
    """Passed to the instrumentation hook after each clip update."""

    step: int  # 0-based outer step
    clip: int  # 0-based clip index
    t_from: torch.Tensor
    t_to: torch.Tensor
    state_in: torch.Tensor  # clip incl. reference slot, before the update
    state_out: torch.Tensor
    digest: str


def _initial_noise(n: int, z_ref: torch.Tensor, eps, gen) -> torch.Tensor:
    shape = (n, *z_ref.shape)
    if eps is None:
        return torch.randn(shape, generator=gen, dtype=z_ref.dtype)
    if tuple(eps.shape) != shape:
        raise ShapeError(f"initial noise {tuple(eps.shape)} != {shape}")
    return eps.to(z_ref.dtype)


def generate(
    denoiser: Denoiser,
    speech: torch.Tensor | None,
    z_ref: torch.Tensor,
    schedule: torch.Tensor,
    cfg: SamplerConfig,
    clip_frames: int,
    n_frames: int | None = None,
    eps: torch.Tensor | None = None,
    gen: torch.Generator | None = None,
    hook: Callable[[ClipEvent], None] | None = None,
) -> LatentVideo:
    """Motion-guided multi-clip reverse process.

    ``speech`` is ``(N, h_w, d_A)`` aligned with the ``N`` generated frames
    (or ``None`` together with ``n_frames``). Returns ``N + 1`` frames with
    the reference at index 0. A denoiser may define ``begin_clip(step, clip)``
    to be told which clip the following calls belong to.
    """
    N = speech.shape[0] if speech is not None else n_frames
    if N is None:
        raise ValueError("pass speech latents or n_frames")
    plan = segment_clips(N, clip_frames)
    check_schedule(schedule)
    T = schedule.to(z_ref.dtype)
    n = len(T)
    f = clip_frames
    zero = T.new_zeros(1)

    cur = _initial_noise(N, z_ref, eps, gen)
    begin = getattr(denoiser, "begin_clip", None)
    for i in range(n - 1):
        nxt = torch.empty_like(cur)
        t_motion_to = T[i + 2] if i + 2 < n else T[-1]
        for j, (s, e) in enumerate(plan.ranges):
            if j == 0:
                frames = cur[s:e]
                t_from = torch.cat([zero, T[i].expand(f)])
                t_to = torch.cat([zero, T[i + 1].expand(f)])
            else:
                # motion frame: last frame of the previous clip, already at T[i+1]
                frames = torch.cat([nxt[s:s + 1], cur[s + 1:e]])
                t_from = torch.cat([zero, T[i + 1:i + 2], T[i].expand(f - 1)])
                t_to = torch.cat([zero, t_motion_to.reshape(1), T[i + 1].expand(f - 1)])
            if begin is not None:
                begin(i, j)
            z = torch.cat([z_ref[None], frames])
            c = speech[s:e] if speech is not None else None
            v = guided_velocity(denoiser, z, c, z_ref, t_from, cfg)
            if v.shape != z.shape:
                raise ShapeError(f"denoiser returned {tuple(v.shape)} for input {tuple(z.shape)}")
            z_new = euler_update(z, v, t_from, t_to)
            if not torch.isfinite(z_new).all():
                raise FloatingPointError(f"non-finite latent at step {i}, clip {j}")
            if j == 0:
                nxt[s:e] = z_new[1:]
            else:
                nxt[s + 1:e] = z_new[2:]
            if hook is not None:
                hook(ClipEvent(i, j, t_from, t_to, z, z_new, digest(z_new)))
        cur = nxt
    return LatentVideo(torch.cat([z_ref[None], cur]), has_reference=True)


def generate_concat(
    denoiser: Denoiser,
    speech: torch.Tensor | None,
    z_ref: torch.Tensor,
    schedule: torch.Tensor,
    cfg: SamplerConfig,
    clip_frames: int,
    n_frames: int | None = None,
    gen: torch.Generator | None = None,
    hook: Callable[[ClipEvent], None] | None = None,
) -> LatentVideo:
    """Baseline without motion guidance: every clip is sampled independently
    with synchronous noise and the clips are concatenated, dropping the first
    frame of each later clip so the layout matches :func:`generate`."""
    N = speech.shape[0] if speech is not None else n_frames
    plan = segment_clips(N, clip_frames)
    check_schedule(schedule)
    T = schedule.to(z_ref.dtype)
    f = clip_frames
    zero = T.new_zeros(1)
    out = torch.empty((N, *z_ref.shape), dtype=z_ref.dtype)
    begin = getattr(denoiser, "begin_clip", None)
    for j, (s, e) in enumerate(plan.ranges):
        z = torch.cat([z_ref[None], torch.randn((f, *z_ref.shape), generator=gen, dtype=z_ref.dtype)])
        c = speech[s:e] if speech is not None else None
        for i in range(len(T) - 1):
            if begin is not None:
                begin(i, j)
            t_from = torch.cat([zero, T[i].expand(f)])
            t_to = torch.cat([zero, T[i + 1].expand(f)])
            z_new = euler_update(z, guided_velocity(denoiser, z, c, z_ref, t_from, cfg), t_from, t_to)
            if not torch.isfinite(z_new).all():
                raise FloatingPointError(f"non-finite latent at step {i}, clip {j}")
            if hook is not None:
                hook(ClipEvent(i, j, t_from, t_to, z, z_new, digest(z_new)))
            z = z_new
        if j == 0:
            out[s:e] = z[1:]
        else:
            out[s + 1:e] = z[2:]
    return LatentVideo(torch.cat([z_ref[None], out]), has_reference=True)


class OracleDenoiser:
    """Closed-form velocity ``(z - z0) / t`` towards known clean latents.

    On the linear path ``z_t = z0 + t (eps - z0)`` one Euler step with this
    field lands exactly on the path again, so sampling returns ``z0`` for
    any schedule. Frames at ``t = 0`` get zero velocity. The sampler tells
    the oracle which clip it is working on through :meth:`begin_clip`.
    """

    def __init__(self, z0: torch.Tensor, clip_frames: int, z_ref: torch.Tensor):
        self.z0 = z0
        self.plan = segment_clips(z0.shape[0], clip_frames)
        self.z_ref = z_ref
        self.clip = 0
        self.calls = 0

    def begin_clip(self, step: int, clip: int) -> None:
        self.clip = clip

    def __call__(self, z, speech, reference, t_vec):
        self.calls += 1
        s, e = self.plan.ranges[self.clip]
        target = torch.cat([self.z_ref[None], self.z0[s:e]]).to(z.dtype)
        t = _bcast(t_vec, z)
        safe = torch.where(t > 0, t, torch.ones_like(t))
        return torch.where(t > 0, (z - target) / safe, torch.zeros_like(z))
