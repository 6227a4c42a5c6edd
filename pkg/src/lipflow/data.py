"""Synthetic talking-face clips with lip-sync known by construction.

Each scene is a flat background whose brightness drifts slowly, a face
rectangle, and a mouth rectangle whose pixels all equal the audio envelope
of the current frame. The paired speech features are short-time magnitudes
of an oscillator bank whose amplitudes follow the same envelope, so the
mouth region and the audio are perfectly correlated before any model
touches them.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ENVELOPE_KINDS = ("sine", "random-walk", "constant")
MANIFEST = "manifest.json"
CORPUS_FORMAT = 1


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    envelope: str = "sine"
    face: tuple[int, int, int, int] = (8, 6, 16, 20)  # top, left, height, width
    mouth: tuple[int, int, int, int] = (18, 11, 4, 10)
    drift_amplitude: float = 0.1
    drift_period: float = 80.0  # frames
    drift_phase: float = 0.0
    constant_level: float = 0.0

    def __post_init__(self):
        if self.envelope not in ENVELOPE_KINDS:
            raise ValueError(f"unknown envelope kind {self.envelope!r}")
        if not 0.0 <= self.constant_level <= 1.0:
            raise ValueError("constant_level must lie in [0, 1]")
        if self.drift_amplitude < 0 or self.drift_period <= 0:
            raise ValueError("drift amplitude must be >= 0 and period > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["face"] = tuple(d["face"])
        d["mouth"] = tuple(d["mouth"])
        return cls(**d)


@dataclass(frozen=True)
class FeatureConfig:
    fps: float = 25.0
    window: int = 2  # H_w: feature sub-windows per video frame
    dim: int = 32  # D_A
    detail: float = 0.05  # std of the seeded per-frame detail


def _check_geometry(spec: SceneSpec, H: int, W: int) -> None:
    for name, (top, left, h, w) in (("face", spec.face), ("mouth", spec.mouth)):
        if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
            raise ValueError(f"{name} rectangle {(top, left, h, w)} does not fit a {H}x{W} frame")


def _palette(seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 17])
    background = rng.uniform(0.3, 0.7, size=3)
    face = rng.uniform(0.15, 0.85, size=3)
    return background, face


def make_envelope(spec: SceneSpec, n_frames: int, fps: float = 25.0) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 3])
    i = np.arange(n_frames)
    if spec.envelope == "constant":
        env = np.full(n_frames, spec.constant_level)
    elif spec.envelope == "sine":
        freq = rng.uniform(0.6, 1.6)
        phase = rng.uniform(0, 2 * np.pi)
        env = 0.5 + 0.5 * np.sin(2 * np.pi * freq * i / fps + phase)
    else:
        env = np.empty(n_frames)
        x = rng.uniform(0.2, 0.8)
        steps = rng.normal(0.0, 0.07, size=n_frames)
        for k in range(n_frames):
            env[k] = x
            x += steps[k]
            # reflect at the boundaries
            if x < 0:
                x = -x
            if x > 1:
                x = 2 - x
    return np.clip(env, 0.0, 1.0)


def render_frames(spec: SceneSpec, mouth_levels: np.ndarray, times: np.ndarray, H: int = 32, W: int = 32) -> np.ndarray:
    """Render frames at the given frame times with the given mouth intensities."""
    _check_geometry(spec, H, W)
    background, face = _palette(spec.seed)
    drift = spec.drift_amplitude * np.sin(2 * np.pi * times / spec.drift_period + spec.drift_phase)
    video = np.empty((len(times), H, W, 3))
    video[:] = np.clip(background[None, :] + drift[:, None], 0.0, 1.0)[:, None, None, :]
    top, left, h, w = spec.face
    video[:, top:top + h, left:left + w, :] = face
    top, left, h, w = spec.mouth
    video[:, top:top + h, left:left + w, :] = np.asarray(mouth_levels)[:, None, None, None]
    return video.astype(np.float32)


def bank_response(level: np.ndarray, dim: int) -> np.ndarray:
    """Magnitude of each oscillator in the bank for envelope ``level``.

    Louder frames shift energy to higher oscillators, so frames with
    different envelope values point in different directions.
    """
    level = np.asarray(level, dtype=np.float64)[..., None]
    centre = 0.2 + 0.6 * level
    pos = np.linspace(0.0, 1.0, dim)
    return level * np.exp(-((pos - centre) ** 2) / (2 * 0.12 ** 2))


def speech_features(envelope: np.ndarray, seed: int, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    env = np.asarray(envelope, dtype=np.float64)
    n = len(env)
    # envelope sampled at each sub-window start
    t = np.arange(n)[:, None] + np.arange(cfg.window)[None, :] / cfg.window
    sub = np.interp(t.ravel(), np.arange(n), env).reshape(n, cfg.window)
    feats = bank_response(sub, cfg.dim)
    rng = np.random.default_rng([seed, 5])
    feats = feats + cfg.detail * rng.standard_normal(feats.shape)
    return feats.astype(np.float32)


def make_pair(
    spec: SceneSpec,
    n_frames: int,
    H: int = 32,
    W: int = 32,
    features: FeatureConfig = FeatureConfig(),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Video ``(F, H, W, 3)``, speech features ``(F, H_w, D_A)`` and envelope ``(F,)``."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    _check_geometry(spec, H, W)
    env = make_envelope(spec, n_frames, features.fps)
    video = render_frames(spec, env, np.arange(n_frames, dtype=np.float64), H, W)
    return video, speech_features(env, spec.seed, features), env.astype(np.float32)


def make_reference(spec: SceneSpec, H: int = 32, W: int = 32) -> np.ndarray:
    """A still of the same scene at a random time, used as the identity image."""
    rng = np.random.default_rng([spec.seed, 11])
    t = rng.uniform(0, spec.drift_period)
    level = rng.uniform(0.0, 1.0)
    return render_frames(spec, np.array([level]), np.array([t]), H, W)[0]


def mouth_intensity(video: np.ndarray, mouth: tuple[int, int, int, int]) -> np.ndarray:
    top, left, h, w = mouth
    return np.asarray(video)[:, top:top + h, left:left + w, :].mean(axis=(1, 2, 3))


def clip_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1)[0])


def sample_scene(seed: int, H: int = 32, W: int = 32, kinds=("sine", "random-walk"), grid: int = 4) -> SceneSpec:
    """Random scene whose rectangle edges sit on a ``grid``-pixel lattice.

    Snapping keeps the toy codec's job small: every 8x8 latent cell holds at
    most one horizontal and one vertical edge at a few known offsets.
    """
    rng = np.random.default_rng([seed, 1])
    gh, gw = H // grid, W // grid
    if gh < 4 or gw < 4:
        raise ValueError(f"frame {H}x{W} is too small for grid {grid}")
    fh = int(rng.integers(max(gh // 2, 3), gh - gh // 4 + 1))
    fw = int(rng.integers(max(gw // 2, 3), gw - gw // 4 + 1))
    ft = int(rng.integers(0, gh - fh + 1))
    fl = int(rng.integers(0, gw - fw + 1))
    mh = 2
    mw = int(rng.integers(max(fw // 3, 2), max(fw - 1, 3)))
    mt = ft + fh // 2 + int(rng.integers(0, fh - fh // 2 - mh + 1))
    ml = fl + int(rng.integers(0, fw - mw + 1))
    return SceneSpec(
        seed=seed,
        envelope=str(rng.choice(list(kinds))),
        face=(ft * grid, fl * grid, fh * grid, fw * grid),
        mouth=(mt * grid, ml * grid, mh * grid, mw * grid),
        drift_amplitude=float(rng.uniform(0.05, 0.2)),
        drift_period=float(rng.uniform(40.0, 120.0)),
        drift_phase=float(rng.uniform(0.0, 2 * np.pi)),
    )


def make_dataset(
    n_clips: int,
    out_dir: str | Path,
    seed: int = 7,
    n_frames: int = 121,
    H: int = 32,
    W: int = 32,
    features: FeatureConfig = FeatureConfig(),
    kinds=("sine", "random-walk"),
) -> Path:
    """Write ``n_clips`` synthetic clips plus a JSON manifest under ``out_dir``."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    specs = [sample_scene(clip_seed(seed, i), H, W, kinds) for i in range(n_clips)]
    manifest = {
        "format": CORPUS_FORMAT,
        "seed": seed,
        "n_frames": n_frames,
        "height": H,
        "width": W,
        "features": dataclasses.asdict(features),
        "kinds": list(kinds),
        "clips": [{"name": f"clip_{i:05d}", "spec": s.to_dict()} for i, s in enumerate(specs)],
    }
    return write_corpus(manifest, out_dir)


def write_corpus(manifest: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats = FeatureConfig(**manifest["features"])
    for entry in manifest["clips"]:
        spec = SceneSpec.from_dict(entry["spec"])
        video, speech, env = make_pair(spec, manifest["n_frames"], manifest["height"], manifest["width"], feats)
        d = out / entry["name"]
        d.mkdir(exist_ok=True)
        np.save(d / "video.npy", video)
        np.save(d / "features.npy", speech)
        np.save(d / "envelope.npy", env)
        np.save(d / "reference.npy", make_reference(spec, manifest["height"], manifest["width"]))
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d clips to %s", len(manifest["clips"]), out)
    return out


def regenerate(corpus_dir: str | Path, out_dir: str | Path) -> Path:
    manifest = json.loads((Path(corpus_dir) / MANIFEST).read_text())
    return write_corpus(manifest, out_dir)


@dataclass
class Corpus:
    videos: np.ndarray  # (n, F, H, W, 3)
    features: np.ndarray  # (n, F, H_w, D_A)
    envelopes: np.ndarray  # (n, F)
    references: np.ndarray  # (n, H, W, 3)
    specs: list[SceneSpec]
    feature_config: FeatureConfig

    def __len__(self) -> int:
        return len(self.specs)

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx)
        return Corpus(self.videos[idx], self.features[idx], self.envelopes[idx],
                      self.references[idx], [self.specs[i] for i in idx], self.feature_config)


def load_corpus(corpus_dir: str | Path) -> Corpus:
    root = Path(corpus_dir)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CORPUS_FORMAT:
        raise ValueError(f"unsupported corpus format {manifest.get('format')!r}")
    names = [c["name"] for c in manifest["clips"]]
    load = lambda name, f: np.load(root / name / f)  # noqa: E731
    return Corpus(
        videos=np.stack([load(n, "video.npy") for n in names]),
        features=np.stack([load(n, "features.npy") for n in names]),
        envelopes=np.stack([load(n, "envelope.npy") for n in names]),
        references=np.stack([load(n, "reference.npy") for n in names]),
        specs=[SceneSpec.from_dict(c["spec"]) for c in manifest["clips"]],
        feature_config=FeatureConfig(**manifest["features"]),
    )


def corpus_in_memory(n_clips: int, seed: int = 7, n_frames: int = 121, H: int = 32, W: int = 32,
                     features: FeatureConfig = FeatureConfig(), kinds=("sine", "random-walk")) -> Corpus:
    """Same content as :func:`make_dataset` without touching the disk."""
    specs = [sample_scene(clip_seed(seed, i), H, W, kinds) for i in range(n_clips)]
    triples = [make_pair(s, n_frames, H, W, features) for s in specs]
    return Corpus(
        videos=np.stack([t[0] for t in triples]),
        features=np.stack([t[1] for t in triples]),
        envelopes=np.stack([t[2] for t in triples]),
        references=np.stack([make_reference(s, H, W) for s in specs]),
        specs=specs,
        feature_config=features,
    )
