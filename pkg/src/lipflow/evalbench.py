"""Desk-scale evaluation: proxy metrics, runtime sweeps and ablations.

None of the metrics here is the published one. The pretrained-network
scores are replaced by proxies, and the mapping is written into every
report header:

* ``sync_proxy``: Pearson r between mouth-region intensity and the audio
  envelope (stands in for SyncNet confidence).
* ``latent_frechet``: Frechet distance between Gaussians fitted to latent
  frames (stands in for FID/FVD).
* ``boundary_score``: seam jump minus typical within-clip motion (stands in
  for the frame-difference heatmaps used to judge clip boundaries).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ans
from .checkpoint import Checkpoint, CheckpointError
from .codec import decode_latents
from .data import Corpus, mouth_intensity

log = logging.getLogger(__name__)

PROXY_NOTE = (
    "proxy metrics: sync_proxy = Pearson(mouth intensity, envelope) in place of Sync-C; "
    "latent_frechet = Frechet distance on latent frames in place of FID/FVD; "
    "boundary_score = seam frame difference minus median within-clip difference. "
    "No pretrained network is involved and values are not comparable to published numbers."
)

FRECHET_EPS = 1e-6


class UndefinedCorrelation(ValueError):
    """Raised when a Pearson correlation has a zero-variance input."""


# ----------------------------------------------------------------- metrics


def frame_differences(video) -> np.ndarray:
    """Mean absolute difference between consecutive frames, ``(F-1,)``.

    Entry ``i`` is the transition from frame ``i`` to frame ``i + 1``.
    """
    v = np.asarray(video, dtype=np.float64)
    if v.ndim < 2 or len(v) < 2:
        raise ValueError("need a video of at least 2 frames")
    d = np.abs(np.diff(v, axis=0))
    return d.reshape(len(d), -1).mean(axis=1)


def boundary_score(video, seams) -> float:
    """Seam jump relative to ordinary motion.

    ``seams`` are frame indices ``s`` such that the transition ``s-1 -> s``
    crosses a clip boundary. The score is the mean absolute inter-frame
    difference over seam transitions minus the median over all other
    transitions.
    """
    d = frame_differences(video)
    seams = sorted({int(s) for s in seams})
    if not seams:
        raise ValueError("need at least one seam")
    for s in seams:
        if not 1 <= s < len(d) + 1:
            raise ValueError(f"seam index {s} is not an interior frame of a {len(d) + 1}-frame video")
    at = np.asarray(seams) - 1
    rest = np.delete(d, at)
    baseline = float(np.median(rest)) if len(rest) else 0.0
    return float(d[at].mean() - baseline)


def pixel_seams(plan: ans.ClipPlan, temporal_ratio: int, n_pixel_frames: int | None = None) -> list[int]:
    """Pixel frames that start a new clip's contribution.

    Clip ``j > 0`` owns latent frames after the shared overlap frame
    ``s = j (f - 1)``; the first pixel frame it decodes is ``s r_t + 1``.
    """
    seams = [s * temporal_ratio + 1 for s, _ in plan.ranges[1:]]
    if n_pixel_frames is not None:
        seams = [s for s in seams if s < n_pixel_frames]
    return seams


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need two equal-length series, got {x.shape} and {y.shape}")
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.sqrt((xc ** 2).sum()), np.sqrt((yc ** 2).sum())
    if nx == 0 or ny == 0:
        raise UndefinedCorrelation("correlation undefined: a series has zero variance")
    return float(np.clip((xc * yc).sum() / (nx * ny), -1.0, 1.0))


def sync_proxy(video, envelope, mouth: tuple[int, int, int, int]) -> float:
    """Pearson r between per-frame mouth intensity and the envelope."""
    env = np.asarray(envelope)
    if len(env) != len(video):
        raise ValueError(f"envelope has {len(env)} frames, video has {len(video)}")
    return pearson(mouth_intensity(video, mouth), env)


def gaussian_stats(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need a (n >= 2, d) sample matrix")
    return x.mean(axis=0), np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b, eps: float = FRECHET_EPS) -> float:
    d = len(mu_a)
    cov_a = cov_a + eps * np.eye(d)
    cov_b = cov_b + eps * np.eye(d)
    # Tr (A B)^1/2 = Tr (A^1/2 B A^1/2)^1/2, which is symmetric PSD
    root = _psd_sqrt(cov_a)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(root @ cov_b @ root), 0.0, None)).sum()
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    val = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross
    return float(max(val, 0.0))


def latent_frechet(a, b, eps: float = FRECHET_EPS) -> float:
    """Frechet distance between Gaussians fitted to sample sets ``(n, ...)``.

    Samples are flattened; both covariances get ``eps`` on the diagonal.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sizes differ: {a.shape[1]} vs {b.shape[1]}")
    return frechet_from_stats(*gaussian_stats(a), *gaussian_stats(b), eps=eps)


# ----------------------------------------------------------------- reports


def _finite(v) -> bool:
    return not isinstance(v, float) or math.isfinite(v)


@dataclass
class EvalReport:
    """A table of metric rows plus the context needed to reproduce it."""

    name: str
    rows: list[dict]
    seeds: list[int] = field(default_factory=list)
    runtime: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.rows:
            cols += [k for k in r if k not in cols]
        return cols

    def validate(self) -> None:
        for i, r in enumerate(self.rows):
            bad = [k for k, v in r.items() if not _finite(v)]
            if bad:
                raise ValueError(f"{self.name}: row {i} has non-finite values in {bad}")
        for k, v in self.runtime.items():
            if isinstance(v, (int, float)) and not v > 0:
                raise ValueError(f"{self.name}: runtime {k} must be positive, got {v}")

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})
        return path

    def summary(self) -> str:
        lines = [f"# {self.name}", f"# {PROXY_NOTE}"]
        for k, v in self.provenance.items():
            lines.append(f"# {k}: {v}")
        if self.seeds:
            lines.append(f"# seeds: {self.seeds}")
        for k, v in self.runtime.items():
            lines.append(f"# runtime {k}: {v:.6g}" if isinstance(v, float) else f"# runtime {k}: {v}")
        lines += [f"# note: {n}" for n in self.notes]
        cols = [c for c in self.columns if not isinstance(self.rows[0].get(c), (list, dict))] if self.rows else []
        lines.append("\t".join(cols))
        for r in self.rows:
            lines.append("\t".join(_fmt(r.get(c, "")) for c in cols))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.to_csv(out / f"{self.name}.csv")
        (out / f"{self.name}.txt").write_text(self.summary())
        (out / f"{self.name}.json").write_text(json.dumps(self.to_dict(), indent=2))
        return out


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def provenance(ckpt: Checkpoint) -> dict:
    return {"checkpoint": ckpt.digest()[:16], "config": config_hash(ckpt.config)}


# ----------------------------------------------------------------- protocol


@dataclass
class EvalSet:
    """Held-out clips long enough for ``max_clips`` overlapping clips.

    ``latents`` are the codec encodings used as the Frechet reference set
    and as oracle targets.
    """

    corpus: Corpus
    speech: torch.Tensor  # (n, N, h_w, d_A)
    latents: torch.Tensor  # (n, N, h, w, c)
    references: torch.Tensor  # (n, h, w, c)
    max_clips: int
    clip_frames: int

    @property
    def n_latent(self) -> int:
        return self.max_clips * (self.clip_frames - 1) + 1


def make_eval_set(system, n_clips: int = 8, max_clips: int = 8, seed: int | None = None) -> EvalSet:
    """Fresh clips from a seed disjoint from the training corpus."""
    from .data import corpus_in_memory
    from .pipeline import feature_config

    cfg = system.cfg
    f = cfg.latent_frames
    n_lat = max_clips * (f - 1) + 1
    n_px = 1 + (n_lat - 1) * cfg.codec.temporal_ratio
    seed = cfg.corpus_seed + 10_000 if seed is None else seed
    corpus = corpus_in_memory(n_clips, seed=seed, n_frames=n_px, H=cfg.height, W=cfg.width,
                              features=feature_config(cfg))
    return EvalSet(
        corpus=corpus,
        speech=system.encode_speech(corpus.features),
        latents=system.encode_videos(corpus.videos),
        references=system.encode_videos(corpus.references[:, None])[:, 0],
        max_clips=max_clips,
        clip_frames=f,
    )


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0] % (2 ** 31))


@dataclass
class LengthResult:
    metrics: dict
    latents: torch.Tensor  # (n, N, h, w, c) stitched generations
    videos: np.ndarray
    calls: int
    backbone_seconds: float


def _segments(evalset: EvalSet, clips: int) -> list[tuple[int, int]]:
    if evalset.max_clips % clips:
        raise ValueError(f"{clips} clips do not tile {evalset.max_clips}")
    span = clips * (evalset.clip_frames - 1)
    return [(a, a + span + 1) for a in range(0, evalset.n_latent - 1, span)]


def evaluate_length(
    system,
    evalset: EvalSet,
    clips: int,
    sampler: ans.SamplerConfig,
    seed: int = 0,
    motion_guided: bool = True,
    oracle: bool = False,
) -> LengthResult:
    """Generate every eval clip as consecutive ``clips``-clip videos and score it.

    Segments are stitched (dropping the repeated overlap frame) so every
    length is scored on the same frames:

    * ``sync_proxy``: median over eval clips and base-clip windows of the
      per-window Pearson r; windows are one clip long for every length.
    * ``latent_frechet``: all generated latent frames against the encoded
      ground truth.
    * ``boundary_score``: at latent-frame transitions inside base clips, the
      same transitions for every length.
    * ``seam_score``: at the clip seams inside generated videos (present
      when ``clips > 1``).
    """
    from .pipeline import BackboneDenoiser

    cfg = system.cfg
    f, r = evalset.clip_frames, cfg.codec.temporal_ratio
    segments = _segments(evalset, clips)
    schedule = ans.make_schedule(sampler.steps, sampler.schedule_shift, dtype=torch.float64 if oracle else torch.float32)
    n = len(evalset.corpus)
    out = torch.empty_like(evalset.latents)
    calls, seconds = 0, 0.0
    den = None if oracle else BackboneDenoiser(system.backbone)
    for c in range(n):
        z_ref = evalset.references[c]
        for g, (a, b) in enumerate(segments):
            gen = torch.Generator().manual_seed(_seed(seed, c, g))
            if oracle:
                den = ans.OracleDenoiser(evalset.latents[c, a:b].double(), f, z_ref.double())
                z = ans.generate(den, None, z_ref.double(), schedule, sampler, f, n_frames=b - a, gen=gen)
                calls += den.calls
            elif motion_guided:
                z = ans.generate(den, evalset.speech[c, a:b], z_ref, schedule, sampler, f, gen=gen)
            else:
                z = ans.generate_concat(den, evalset.speech[c, a:b], z_ref, schedule, sampler, f, gen=gen)
            z = z.data[1:].to(out.dtype)
            if g == 0:
                out[c, a:b] = z
            else:
                out[c, a + 1:b] = z[1:]
    if den is not None and not oracle:
        calls, seconds = den.calls, den.elapsed

    videos = np.stack([decode_latents_batch(system, out[c]) for c in range(n)])
    spans = [(s * r + 1 if s else 0, e * r - r + 1) for s, e in ans.segment_clips(evalset.n_latent, f).ranges]
    syncs = []
    for c in range(n):
        mouth = evalset.corpus.specs[c].mouth
        env = evalset.corpus.envelopes[c]
        for p0, p1 in spans:
            syncs.append(sync_proxy(videos[c, p0:p1], env[p0:p1], mouth))
    # latent m -> m + 1 starts at pixel m r + 1; transitions at clip starts are seams
    inner = [m * r + 1 for m in range(evalset.n_latent - 1) if m % (f - 1)]
    seams = [s * r + 1 for a, b in segments for s in range(a + f - 1, b - 1, f - 1)]
    metrics = {
        "sync_proxy": float(np.median(syncs)),
        "latent_frechet": latent_frechet(out.reshape(-1, *out.shape[2:]).numpy(),
                                         evalset.latents.reshape(-1, *out.shape[2:]).numpy()),
        "boundary_score": float(np.median([boundary_score(v, inner) for v in videos])),
    }
    if seams:
        metrics["seam_score"] = float(np.median([boundary_score(v, seams) for v in videos]))
    return LengthResult(metrics, out, videos, calls, seconds)


def decode_latents_batch(system, z: torch.Tensor) -> np.ndarray:
    from .codec import LatentVideo

    return decode_latents(LatentVideo(z.to(torch.float32)), system.codec)


def _system(ckpt):
    from .checkpoint import load_checkpoint
    from .pipeline import System

    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt)
    system = System.from_checkpoint(ckpt)
    return ckpt, system


class single_thread:
    """Context manager pinning torch to one intra-op thread."""

    def __enter__(self):
        self.prev = torch.get_num_threads()
        torch.set_num_threads(1)
        return self

    def __exit__(self, *exc):
        torch.set_num_threads(self.prev)


def _require_backbone(system) -> None:
    if system.backbone is None:
        raise CheckpointError("checkpoint has no trained backbone")


def _untrained_note(ckpt: Checkpoint) -> list[str]:
    if ckpt.metadata.get("stage") != 2 or not ckpt.metadata.get("step"):
        return ["WARNING: checkpoint has no completed stage-2 training; numbers describe an untrained backbone"]
    return []


# ----------------------------------------------------------------- experiments


def long_horizon_eval(
    ckpt,
    clip_counts=(1, 4, 8),
    n_clips: int = 8,
    seed: int = 0,
    oracle: bool = False,
    sampler: ans.SamplerConfig | None = None,
    evalset: EvalSet | None = None,
) -> EvalReport:
    """Metrics for 1-, 4- and 8-clip generations of the same eval clips.

    Drift columns are ``|m_k - m_1| / |m_1|`` against the 1-clip row. With
    ``oracle=True`` the backbone is replaced by the closed-form oracle and
    sampling runs in 64-bit, so every length reproduces the encoded ground
    truth exactly.
    """
    ckpt, system = _system(ckpt)
    if not oracle:
        _require_backbone(system)
    clip_counts = sorted(clip_counts)
    if clip_counts[0] != 1:
        raise ValueError("the 1-clip baseline must be part of clip_counts")
    sampler = sampler or system.cfg.sampler
    with single_thread():
        evalset = evalset or make_eval_set(system, n_clips, max(clip_counts))
        rows = []
        for k in clip_counts:
            res = evaluate_length(system, evalset, k, sampler, seed, oracle=oracle)
            rows.append({"clips": k, "latent_frames": k * (evalset.clip_frames - 1) + 1,
                         "videos_per_clip": evalset.max_clips // k, "seed": seed,
                         "calls": res.calls, **res.metrics})
    base = rows[0]
    for row in rows:
        for m in ("sync_proxy", "latent_frechet", "boundary_score"):
            row[f"{m}_drift"] = relative_drift(row[m], base[m])
    report = EvalReport(
        "long_horizon", rows, seeds=[seed], provenance=provenance(ckpt),
        notes=(["oracle denoiser"] if oracle else _untrained_note(ckpt)),
    )
    report.validate()
    return report


def relative_drift(value: float, base: float) -> float:
    if value == base:
        return 0.0
    return abs(value - base) / max(abs(base), 1e-12)


def time_generation(system, evalset: EvalSet, samplers, clips: int = 1, reps: int = 5, warmup: int = 1,
                    rounds: int = 10, seed: int = 0) -> list[dict]:
    """Wall-clock per sampler: median over ``reps`` timed blocks after ``warmup`` blocks.

    A block is ``rounds`` rounds; each round generates one ``clips``-clip
    video with every sampler, in an order that rotates from round to round.
    Interleaving many short videos spreads the host's slow speed drift and
    its preemption stalls evenly over the samplers, which a handful of
    long back-to-back runs does not. Backbone time is accumulated inside
    the denoiser; total time also covers speech encoding, reference
    encoding and decoding. Per-block values are means per video.
    """
    from .pipeline import generate_video

    f = evalset.clip_frames
    n_px = 1 + clips * (f - 1) * system.cfg.codec.temporal_ratio
    feats = evalset.corpus.features[0, :n_px]
    ref = evalset.corpus.references[0]
    n = len(samplers)
    blocks = [{"backbone": [], "total": [], "calls": set()} for _ in samplers]
    for rep in range(warmup + reps):
        bb, tot = [0.0] * n, [0.0] * n
        for r in range(rounds):
            order = [(i + r) % n for i in range(n)]
            if r % 2:
                order.reverse()
            for i in order:
                s = samplers[i]
                res = generate_video(system, feats, ref, n_frames=n_px, steps=s.steps, cfg_mode=s.cfg_mode,
                                     alpha=s.alpha, beta=s.beta, seed=seed)
                bb[i] += res.backbone_seconds
                tot[i] += res.total_seconds
                blocks[i]["calls"].add(res.calls)
        if rep >= warmup:
            for i, acc in enumerate(blocks):
                acc["backbone"].append(bb[i] / rounds)
                acc["total"].append(tot[i] / rounds)
    out = []
    for acc in blocks:
        (n_calls,) = acc["calls"]
        bb = statistics.median(acc["backbone"])
        out.append({
            "backbone_seconds": bb,
            "total_seconds": statistics.median(acc["total"]),
            "backbone_per_clip": bb / clips,
            "calls": n_calls,
            "per_call_seconds": bb / n_calls,
            "block_backbone": acc["backbone"],
        })
    return out


def cfg_work_ratio(system, evalset: EvalSet, steps: int = 8, clips: int = 1, reps: int = 5,
                   rounds: int = 30, seed: int = 0) -> dict:
    """Split over joint backbone wall-clock per generated clip.

    The ratio is taken block by block (both samplers share each block's
    machine state) and the median over blocks is reported.
    """
    samplers = [dataclasses.replace(system.cfg.sampler, steps=steps, cfg_mode=m) for m in ("joint", "split")]
    with single_thread():
        joint, split = time_generation(system, evalset, samplers, clips, reps, rounds=rounds, seed=seed)
    ratios = [s / j for s, j in zip(split["block_backbone"], joint["block_backbone"])]
    return {"ratio": statistics.median(ratios), "block_ratios": ratios,
            "joint_calls": joint["calls"], "split_calls": split["calls"],
            "joint_per_clip": joint["backbone_per_clip"], "split_per_clip": split["backbone_per_clip"]}


def linearity_error(steps, seconds) -> float:
    """Largest relative deviation of ``seconds`` from its least-squares line in ``steps``."""
    x = np.asarray(list(steps), dtype=np.float64)
    y = np.asarray(list(seconds), dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two step counts")
    slope, icept = np.polyfit(x, y, 1)
    fit = slope * x + icept
    return float(np.max(np.abs(y - fit) / np.abs(fit)))


def runtime_sweep(
    ckpt,
    steps=range(4, 11),
    modes=("joint", "split"),
    n_clips: int = 8,
    max_clips: int = 8,
    timing_clips: int = 1,
    reps: int = 5,
    rounds: int = 6,
    seed: int = 0,
    evalset: EvalSet | None = None,
    plot: str | Path | None = None,
) -> EvalReport:
    """Quality and wall-clock for every (steps, CFG mode) pair.

    Quality is scored with :func:`evaluate_length` on 1-clip generations.
    All (steps, mode) samplers are timed together by :func:`time_generation`.
    """
    ckpt, system = _system(ckpt)
    _require_backbone(system)
    steps = list(steps)
    samplers = [dataclasses.replace(system.cfg.sampler, steps=n, cfg_mode=m) for m in modes for n in steps]
    rows = []
    with single_thread():
        evalset = evalset or make_eval_set(system, n_clips, max_clips)
        timings = time_generation(system, evalset, samplers, timing_clips, reps, rounds=rounds, seed=seed)
        for sampler, timing in zip(samplers, timings):
            n = sampler.steps
            expected = ans.calls_per_clip_step(sampler) * timing_clips * (n - 1)
            if timing["calls"] != expected:
                raise RuntimeError(f"{sampler.cfg_mode}/{n}: {timing['calls']} denoiser calls, expected {expected}")
            timing = {k: v for k, v in timing.items() if k != "block_backbone"}
            quality = evaluate_length(system, evalset, 1, sampler, seed)
            rows.append({"steps": n, "cfg_mode": sampler.cfg_mode, "seed": seed, **timing,
                         "sync_proxy": quality.metrics["sync_proxy"],
                         "latent_frechet": quality.metrics["latent_frechet"]})
    runtime = {"per_call_seconds": statistics.median(r["per_call_seconds"] for r in rows),
               "per_video_seconds": statistics.median(r["total_seconds"] for r in rows)}
    for m in modes:
        sel = [r for r in rows if r["cfg_mode"] == m]
        runtime[f"{m}_linearity_error"] = linearity_error([r["steps"] for r in sel],
                                                          [r["backbone_seconds"] for r in sel])
    report = EvalReport("runtime_sweep", rows, seeds=[seed], runtime=runtime, provenance=provenance(ckpt),
                        notes=_untrained_note(ckpt) + [
                            f"timing: median of {reps} blocks after 1 warm-up block; each block is {rounds} "
                            f"rounds of {timing_clips}-clip videos over all samplers in rotating order; one thread"])
    report.validate()
    if plot is not None:
        plot_sweep(report, plot)
    return report


def plot_sweep(report: EvalReport, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for mode in dict.fromkeys(report.column("cfg_mode")):
        rows = [r for r in report.rows if r["cfg_mode"] == mode]
        x = [r["backbone_per_clip"] for r in rows]
        for ax, metric in zip(axes, ("sync_proxy", "latent_frechet")):
            ax.plot(x, [r[metric] for r in rows], marker="o", label=f"{mode} CFG")
            for r, xi in zip(rows, x):
                ax.annotate(str(r["steps"]), (xi, r[metric]), fontsize=7)
    for ax, metric in zip(axes, ("sync_proxy (higher is better)", "latent_frechet (lower is better)")):
        ax.set_xlabel("backbone seconds per clip")
        ax.set_ylabel(metric)
        ax.legend()
    fig.suptitle("steps vs. quality and runtime (labels: sampling steps)")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


ARMS = ("full", "no-pretrain", "no-speechae", "no-ans")
ARM_LABELS = {
    "full": "SpeechAE pre-trained, asynchronous noise, motion-guided clips",
    "no-pretrain": "w/o Pre-training: SpeechAE trained from scratch with the backbone",
    "no-speechae": "w/o SpeechAE: raw features injected via linear projection",
    "no-ans": "w/o ANS: synchronous noise training, clips concatenated",
}


def arm_config(base, arm: str):
    """Experiment config for an ablation arm derived from ``base``."""
    if arm == "full":
        return base
    if arm == "no-pretrain":
        return base.replace(pretrain_speechae=False, freeze_speechae=False)
    if arm == "no-speechae":
        return base.replace(speech_encoder="linear", pretrain_speechae=False, freeze_speechae=False)
    if arm == "no-ans":
        return base.replace(async_noise=False)
    raise ValueError(f"unknown ablation arm {arm!r}; choose from {ARMS}")


def train_family(
    base,
    out_dir: str | Path,
    arms=ARMS,
    seeds=(0,),
    corpus: Corpus | None = None,
    log_every: int = 0,
) -> dict[str, list[Path]]:
    """Train (or reuse) one checkpoint per (arm, seed) under ``out_dir``.

    All arms share the codec trained for ``full``. Stage 1 runs once per
    speech-encoder setup with ``base.seed``; the seed only varies stage 2
    (backbone init, batch order and noise draws). ``no-ans`` reuses the
    stage-1 checkpoint of ``full``. Files that already exist are loaded
    instead of retrained, so an interrupted run resumes where it stopped.
    """
    from .checkpoint import load_checkpoint, save_checkpoint
    from .pipeline import System, _corpus, train_stage1, train_stage2

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise ValueError(f"unknown ablation arm(s) {unknown}; choose from {ARMS}")
    loaded: dict = {}

    def corpus_():
        if "corpus" not in loaded:
            loaded["corpus"] = _corpus(base, corpus)
        return loaded["corpus"]

    def stage1(arm: str):
        name = "full" if arm in ("full", "no-ans") else arm
        path = out / f"stage1_{name}.ckpt"
        if not path.exists():
            if name == "full":
                ckpt = train_stage1(base, corpus_())
            else:
                codec = System.from_checkpoint(stage1("full")).codec
                ckpt = train_stage1(arm_config(base, name), corpus_(), codec=codec)
            save_checkpoint(ckpt, path)
            log.info("stage 1 for %s written to %s", name, path)
        return load_checkpoint(path)

    family: dict[str, list[Path]] = {}
    for arm in arms:
        family[arm] = []
        for seed in seeds:
            path = out / f"{arm}_seed{seed}.ckpt"
            if not path.exists():
                t0 = time.perf_counter()
                cfg = arm_config(base, arm).replace(seed=seed)
                save_checkpoint(train_stage2(cfg, stage1(arm), corpus_(), log_every=log_every), path)
                log.info("%s seed %d trained in %.0fs", arm, seed, time.perf_counter() - t0)
            family[arm].append(path)
    return family


def ablate(
    family: dict,
    arms=ARMS,
    n_clips: int = 8,
    clips: int = 4,
    gen_seeds=(0,),
    sampler: ans.SamplerConfig | None = None,
) -> EvalReport:
    """Score every checkpoint of every arm on the same eval clips.

    ``family`` maps arm name to a list of checkpoints (one per training
    seed) and must share one codec. The ``no-ans`` arm samples clips
    independently and concatenates them; all other arms use the
    motion-guided sampler. Rows are per
    (arm, training seed, generation seed); ``median`` rows summarise each arm.
    """
    missing = [a for a in arms if not family.get(a)]
    if missing:
        raise CheckpointError(f"missing checkpoints for arm(s) {missing}")
    rows, seeds, prov = [], set(), {}
    evalset = None
    with single_thread():
        for arm in arms:
            arm_rows = []
            for ck in family[arm]:
                ckpt, system = _system(ck)
                _require_backbone(system)
                codec = _codec_digest(ckpt)
                if evalset is None:
                    evalset, codec0 = make_eval_set(system, n_clips, clips), codec
                elif codec != codec0:
                    raise ValueError(f"{arm}/{system.cfg.seed}: codec differs from the first checkpoint")
                # arms differ in their speech encoder; video latents come from the shared codec
                own = dataclasses.replace(evalset, speech=system.encode_speech(evalset.corpus.features))
                s = sampler or system.cfg.sampler
                for g in gen_seeds:
                    res = evaluate_length(system, own, clips, s, g, motion_guided=(arm != "no-ans"))
                    row = {"arm": arm, "train_seed": system.cfg.seed, "gen_seed": g, **res.metrics}
                    arm_rows.append(row)
                    seeds.add(system.cfg.seed)
                prov[f"{arm}/{system.cfg.seed}"] = provenance(ckpt)["checkpoint"]
            med = {"arm": arm, "train_seed": "median", "gen_seed": "median"}
            for m in arm_rows[0]:
                if m not in med:
                    med[m] = float(np.median([r[m] for r in arm_rows]))
            rows += arm_rows + [med]
    report = EvalReport("ablation", rows, seeds=sorted(seeds), provenance=prov,
                        notes=[f"{a}: {ARM_LABELS[a]}" for a in arms])
    report.validate()
    return report


def _codec_digest(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    for k in sorted(k for k in ckpt.arrays if k.startswith("codec/")):
        h.update(k.encode())
        h.update(np.ascontiguousarray(ckpt.arrays[k]).tobytes())
    return h.hexdigest()


def arm_medians(report: EvalReport) -> dict[str, dict]:
    return {r["arm"]: r for r in report.rows if r["train_seed"] == "median"}
