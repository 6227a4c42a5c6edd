"""Two-stage training, checkpoint I/O and end-to-end generation."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import ans
from .audio import logmel_features, read_wav
from .backbone import A2VDiT, BackboneConfig, ConditionSet, dropout_masks
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .codec import CodecConfig, LatentVideo, VideoCodec, compression_shape, decode_latents, train_codec
from .data import Corpus, FeatureConfig, load_corpus
from .speechae import SpeechAE, SpeechAEConfig, pretrain_speechae

log = logging.getLogger(__name__)

SPEECH_ENCODERS = ("speechae", "linear")


@dataclass
class ExperimentConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    speechae: SpeechAEConfig = field(default_factory=SpeechAEConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sampler: ans.SamplerConfig = field(default_factory=ans.SamplerConfig)
    corpus: str = "corpus"
    corpus_clips: int = 200
    corpus_seed: int = 7
    corpus_frames: int = 121
    height: int = 32
    width: int = 32
    fps: float = 25.0
    clip_frames: int = 57  # pixel frames per denoiser window
    seed: int = 0
    codec_epochs: int = 20
    codec_lr: float = 3e-3
    codec_batch: int = 16
    speechae_epochs: int = 30
    speechae_lr: float = 1e-4
    stage2_steps: int = 1000
    stage2_lr: float = 1e-5
    stage2_schedule: str = "constant"  # or "cosine" decay to zero over the run
    batch_size: int = 1
    freeze_speechae: bool = True
    pretrain_speechae: bool = True
    speech_encoder: str = "speechae"  # "linear": raw features through a linear map
    async_noise: bool = True
    tvec_mode: str = "step"

    @property
    def latent_frames(self) -> int:
        return compression_shape(self.clip_frames, self.height, self.width, self.codec)[0]

    def validate(self) -> None:
        c, s, b = self.codec, self.speechae, self.backbone
        if c.temporal_ratio != s.temporal_ratio:
            raise ValueError(f"codec temporal ratio {c.temporal_ratio} != speechae ratio {s.temporal_ratio}")
        f, h, w = compression_shape(self.clip_frames, self.height, self.width, c)
        compression_shape(self.corpus_frames, self.height, self.width, c)
        if self.corpus_frames < self.clip_frames:
            raise ValueError("corpus clips are shorter than the training window")
        if f < 2:
            raise ValueError("training window must span at least two latent frames")
        if tuple(b.latent_hw) != (h, w) or b.latent_channels != c.latent_channels:
            raise ValueError(f"backbone expects {b.latent_hw}x{b.latent_channels}, codec gives {(h, w)}x{c.latent_channels}")
        if (b.audio_window, b.audio_dim) != (s.latent_window, s.latent_dim):
            raise ValueError("backbone audio dims do not match the speech latent")
        if self.stage2_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown stage-2 schedule {self.stage2_schedule!r}")
        if self.speech_encoder not in SPEECH_ENCODERS:
            raise ValueError(f"unknown speech encoder {self.speech_encoder!r}")
        if self.speech_encoder == "linear" and s.window != s.latent_window:
            raise ValueError("linear speech projection keeps the window size")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        bb = dict(d.get("backbone", {}))
        if "latent_hw" in bb:
            bb["latent_hw"] = tuple(bb["latent_hw"])
        return cls(
            codec=CodecConfig(**d.pop("codec", {})),
            speechae=SpeechAEConfig(**d.pop("speechae", {})),
            backbone=BackboneConfig(**bb),
            sampler=ans.SamplerConfig(**d.pop("sampler", {})),
            **{k: v for k, v in d.items() if k != "backbone"},
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)



def desk_config(**changes) -> ExperimentConfig:
    """Stage-2 settings that train the toy backbone in minutes on one CPU.

    The published stage-2 recipe (lr 1e-5, batch 1) stays the default of
    :class:`ExperimentConfig`; at that rate the toy backbone learns nothing
    useful within a desk-scale step budget.
    """
    cfg = ExperimentConfig(
        backbone=BackboneConfig(width=64),
        stage2_steps=2000,
        stage2_lr=2e-3,
        stage2_schedule="cosine",
        batch_size=32,
    )
    return cfg.replace(**changes)


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))


class LinearSpeechProjection(nn.Module):
    """Raw speech features fed straight to the backbone through a linear map.

    There is no temporal compression: each latent frame takes the raw
    feature frame at the end of the pixel frames it covers.
    """

    def __init__(self, cfg: SpeechAEConfig):
        super().__init__()
        self.ratio = cfg.temporal_ratio
        self.proj = nn.Linear(cfg.dim, cfg.latent_dim)

    def encode(self, s: torch.Tensor) -> torch.Tensor:
        idx = torch.arange(0, s.shape[1], self.ratio)
        return self.proj(s[:, idx])


def make_speech_encoder(cfg: ExperimentConfig) -> nn.Module:
    return SpeechAE(cfg.speechae) if cfg.speech_encoder == "speechae" else LinearSpeechProjection(cfg.speechae)


def speech_namespace(cfg: ExperimentConfig) -> str:
    return "speechae" if cfg.speech_encoder == "speechae" else "speech_projection"


@dataclass
class System:
    cfg: ExperimentConfig
    codec: VideoCodec
    speech: nn.Module
    backbone: A2VDiT | None = None

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "System":
        cfg = ExperimentConfig.from_dict(ckpt.config)
        codec = ckpt.load_module("codec", VideoCodec(cfg.codec)).eval()
        speech = ckpt.load_module(speech_namespace(cfg), make_speech_encoder(cfg)).eval()
        backbone = None
        if "backbone" in ckpt.namespaces():
            backbone = ckpt.load_module("backbone", A2VDiT(cfg.backbone)).eval()
        return cls(cfg, codec, speech, backbone)

    def to_checkpoint(self, metadata: dict) -> Checkpoint:
        ckpt = Checkpoint(metadata=metadata, config=self.cfg.to_dict())
        ckpt.put_module("codec", self.codec)
        ckpt.put_module(speech_namespace(self.cfg), self.speech)
        if self.backbone is not None:
            ckpt.put_module("backbone", self.backbone)
        return ckpt

    @torch.no_grad()
    def encode_videos(self, videos, batch: int = 8) -> torch.Tensor:
        v = torch.as_tensor(np.asarray(videos), dtype=torch.float32)
        return torch.cat([self.codec.encode(v[i:i + batch]) for i in range(0, len(v), batch)])

    @torch.no_grad()
    def encode_speech(self, feats, batch: int = 16) -> torch.Tensor:
        s = torch.as_tensor(np.asarray(feats), dtype=torch.float32)
        return torch.cat([self.speech.encode(s[i:i + batch]) for i in range(0, len(s), batch)])


def _corpus(cfg: ExperimentConfig, corpus: Corpus | None) -> Corpus:
    if corpus is not None:
        return corpus
    if not Path(cfg.corpus).exists():
        raise FileNotFoundError(f"corpus {cfg.corpus} does not exist; run make-data first")
    return load_corpus(cfg.corpus)


def train_stage1(cfg: ExperimentConfig, corpus: Corpus | None = None, codec: VideoCodec | None = None) -> Checkpoint:
    """Train the codec (unless one is given) and pretrain the speech autoencoder."""
    cfg.validate()
    corpus = _corpus(cfg, corpus)
    meta: dict = {"stage": 1, "seed": cfg.seed}
    if codec is None:
        codec, curve = train_codec(corpus.videos, cfg.codec_epochs, cfg.codec_lr, cfg.codec, cfg.codec_batch, cfg.seed)
        meta["codec_loss"] = curve
    torch.manual_seed(cfg.seed)
    if cfg.speech_encoder == "speechae" and cfg.pretrain_speechae:
        speech, curve = pretrain_speechae(corpus.features, cfg.speechae, cfg.speechae_lr, cfg.speechae_epochs, cfg.seed)
        meta["speechae_loss"] = curve
    else:
        speech = make_speech_encoder(cfg)
    return System(cfg, codec.eval(), speech.eval()).to_checkpoint(meta)


def _windows(x: torch.Tensor, idx: torch.Tensor, offset: torch.Tensor, f: int) -> torch.Tensor:
    return x[idx[:, None], offset[:, None] + torch.arange(f)[None]]


def train_stage2(
    cfg: ExperimentConfig,
    stage1: Checkpoint,
    corpus: Corpus | None = None,
    steps: int | None = None,
    log_every: int = 200,
) -> Checkpoint:
    """Train the backbone with the asynchronous (or synchronous) forward process."""
    cfg.validate()
    corpus = _corpus(cfg, corpus)
    base = ExperimentConfig.from_dict(stage1.config)
    if base.codec != cfg.codec:
        raise ValueError("stage-1 codec config differs from the experiment config")
    system = System.from_checkpoint(Checkpoint(stage1.arrays, stage1.metadata, cfg.to_dict()))
    steps = cfg.stage2_steps if steps is None else steps
    f, B = cfg.latent_frames, cfg.batch_size

    latents = system.encode_videos(corpus.videos)
    refs = system.encode_videos(corpus.references[:, None])[:, 0]
    feats = torch.as_tensor(corpus.features, dtype=torch.float32)
    train_speech = not cfg.freeze_speechae
    speech_lat = None if train_speech else system.encode_speech(feats)
    n, n_lat = latents.shape[:2]

    torch.manual_seed(cfg.seed)
    backbone = A2VDiT(cfg.backbone)
    params = list(backbone.parameters())
    if train_speech:
        system.speech.train()
        params += list(system.speech.parameters())
    opt = torch.optim.Adam(params, lr=cfg.stage2_lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1)) if cfg.stage2_schedule == "cosine" else None
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    mask = torch.ones(f + 1, dtype=torch.bool)
    mask[0] = False
    curve, dropped = [], torch.zeros(2, dtype=torch.long)
    t0 = time.perf_counter()
    for step in range(steps):
        idx = torch.randint(n, (B,), generator=gen)
        off = torch.randint(n_lat - f + 1, (B,), generator=gen)
        z0 = torch.cat([refs[idx][:, None], _windows(latents, idx, off, f)], dim=1)
        if train_speech:
            speech = _windows(system.speech.encode(feats[idx]), torch.arange(B), off, f)
        else:
            speech = _windows(speech_lat, idx, off, f)
        t1, t2 = ans.sample_async_timesteps_batch(B, cfg.sampler.mu, cfg.sampler.sigma, cfg.sampler.shift, gen)
        if not cfg.async_noise:
            t1 = t2
        t_vec = ans.build_train_tvec(f, t1, t2, cfg.tvec_mode).float()
        eps = torch.randn(z0.shape, generator=gen)
        eps[:, 0] = 0
        z_t = ans.add_noise_async(z0, t_vec, eps)
        keep_s, keep_r = dropout_masks(B, cfg.backbone.p_drop, gen)
        dropped += torch.stack([(~keep_s).sum(), (~keep_r).sum()])
        cond = ConditionSet(speech=speech, reference=refs[idx], speech_keep=keep_s, reference_keep=keep_r)
        loss = ans.fm_loss(backbone(z_t, cond, t_vec), ans.fm_target(z0, eps), mask)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"stage-2 loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        curve.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            log.info("stage2 step %d loss %.4f (%.1fs)", step + 1, np.mean(curve[-log_every:]), time.perf_counter() - t0)

    backbone.eval()
    system.speech.eval()
    system.backbone = backbone
    meta = dict(stage1.metadata)
    meta.update({
        "stage": 2,
        "seed": cfg.seed,
        "step": steps,
        "stage2_loss": curve,
        "dropout": {"samples": steps * B, "speech_dropped": int(dropped[0]), "reference_dropped": int(dropped[1]),
                    "p_drop": cfg.backbone.p_drop},
    })
    return system.to_checkpoint(meta)


class BackboneDenoiser:
    """Adapts the batched backbone to the single-clip denoiser protocol and
    accumulates the time spent inside backbone calls."""

    def __init__(self, model: A2VDiT):
        self.model = model
        self.calls = 0
        self.elapsed = 0.0

    @torch.no_grad()
    def __call__(self, z, speech, reference, t_vec):
        t0 = time.perf_counter()
        cond = ConditionSet(
            speech=None if speech is None else speech[None],
            reference=None if reference is None else reference[None],
        )
        out = self.model(z[None], cond, t_vec[None].to(z.dtype))[0]
        self.elapsed += time.perf_counter() - t0
        self.calls += 1
        return out


def _pad_frames(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    return np.concatenate([x, np.repeat(x[-1:], n - len(x), axis=0)])


def latent_length(n_pixel_frames: int, cfg: ExperimentConfig) -> int:
    """Valid latent length for a requested pixel frame count (rounded up)."""
    r = cfg.codec.temporal_ratio
    need = 1 + -(-(n_pixel_frames - 1) // r)
    return ans.valid_length(need, cfg.latent_frames)


@dataclass
class GenerationResult:
    video: np.ndarray
    latents: LatentVideo
    backbone_seconds: float
    total_seconds: float
    calls: int
    info: dict


def generate_latents(system: System, speech_latent: torch.Tensor, z_ref: torch.Tensor, sampler: ans.SamplerConfig,
                     seed: int, motion_guided: bool = True, hook=None) -> tuple[LatentVideo, BackboneDenoiser]:
    den = BackboneDenoiser(system.backbone)
    schedule = ans.make_schedule(sampler.steps, sampler.schedule_shift, dtype=torch.float32)
    gen = torch.Generator().manual_seed(seed)
    f = system.cfg.latent_frames
    if motion_guided:
        out = ans.generate(den, speech_latent, z_ref, schedule, sampler, f, gen=gen, hook=hook)
    else:
        out = ans.generate_concat(den, speech_latent, z_ref, schedule, sampler, f, gen=gen, hook=hook)
    return out, den


def generate_video(
    system: System,
    audio,
    reference: np.ndarray,
    n_frames: int | None = None,
    duration: float | None = None,
    steps: int = 8,
    cfg_mode: str = "split",
    alpha: float = 2.0,
    beta: float = 6.0,
    seed: int = 0,
    out_dir: str | Path | None = None,
    motion_guided: bool = True,
) -> GenerationResult:
    """Audio plus reference image to pixel frames.

    ``audio`` is a WAV path or a feature array ``(F, H_w, D_A)``. The frame
    count comes from ``n_frames``, ``duration`` (seconds) or the audio
    length; it is rounded up to a whole number of overlapping clips for
    sampling and trimmed afterwards.
    """
    cfg = system.cfg
    if system.backbone is None:
        raise CheckpointError("checkpoint has no trained backbone")
    t_start = time.perf_counter()
    reference = np.asarray(reference, dtype=np.float32)
    if reference.shape != (cfg.height, cfg.width, cfg.codec.pixel_channels):
        raise ValueError(f"reference image {reference.shape} does not match codec resolution "
                         f"{(cfg.height, cfg.width, cfg.codec.pixel_channels)}")
    if isinstance(audio, (str, Path)):
        samples, rate = read_wav(audio)
        avail = int(np.floor(len(samples) / rate * cfg.fps))
    else:
        feats = np.asarray(audio, dtype=np.float32)
        if feats.ndim != 3 or feats.shape[1:] != (cfg.speechae.window, cfg.speechae.dim):
            raise ValueError(f"features {feats.shape} do not match ({cfg.speechae.window}, {cfg.speechae.dim})")
        avail = len(feats)
    if n_frames is None:
        n_frames = int(round(duration * cfg.fps)) if duration is not None else avail
    if n_frames < 1:
        raise ValueError("need at least one frame")
    N = latent_length(n_frames, cfg)
    padded = 1 + (N - 1) * cfg.codec.temporal_ratio
    if isinstance(audio, (str, Path)):
        need = int(np.ceil(padded * rate / cfg.fps)) + 1
        samples = np.concatenate([samples, np.zeros(max(0, need - len(samples)))])
        feats = logmel_features(samples, rate, cfg.fps, padded, cfg.speechae.dim, cfg.speechae.window)
    else:
        feats = _pad_frames(feats, padded)

    sampler = dataclasses.replace(cfg.sampler, steps=steps, cfg_mode=cfg_mode, alpha=alpha, beta=beta)
    speech = system.encode_speech(feats[None])[0]
    z_ref = system.encode_videos(reference[None, None])[0, 0]
    latents, den = generate_latents(system, speech, z_ref, sampler, seed, motion_guided)
    video = decode_latents(latents.strip_reference(), system.codec)[:n_frames]
    total = time.perf_counter() - t_start
    info = {
        "frames": n_frames,
        "latent_frames": N,
        "clips": ans.segment_clips(N, cfg.latent_frames).n_clips,
        "steps": steps,
        "cfg_mode": cfg_mode,
        "alpha": alpha,
        "beta": beta,
        "seed": seed,
        "motion_guided": motion_guided,
        "fps": cfg.fps,
        "backbone_calls": den.calls,
        "backbone_seconds": den.elapsed,
        "total_seconds": total,
    }
    if out_dir is not None:
        write_frames(video, out_dir, info)
    return GenerationResult(video, latents, den.elapsed, total, den.calls, info)


def write_frames(video: np.ndarray, out_dir: str | Path, info: dict) -> Path:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pixels = np.round(np.clip(video, 0, 1) * 255).astype(np.uint8)
    for i, frame in enumerate(pixels):
        Image.fromarray(frame).save(out / f"frame_{i:05d}.png")
    (out / "run.json").write_text(json.dumps(info, indent=2))
    return out


def run_stage1(cfg: ExperimentConfig, out: str | Path, corpus: Corpus | None = None) -> Path:
    return save_checkpoint(train_stage1(cfg, corpus), out)


def run_stage2(cfg: ExperimentConfig, stage1_path: str | Path, out: str | Path, corpus: Corpus | None = None) -> Path:
    return save_checkpoint(train_stage2(cfg, load_checkpoint(stage1_path), corpus), out)


def feature_config(cfg: ExperimentConfig) -> FeatureConfig:
    return FeatureConfig(fps=cfg.fps, window=cfg.speechae.window, dim=cfg.speechae.dim)
