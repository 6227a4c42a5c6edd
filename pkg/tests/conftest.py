import hashlib
import json
from pathlib import Path

import pytest

import lipflow
from lipflow import data, evalbench, pipeline
from lipflow.backbone import BackboneConfig
from lipflow.codec import CodecConfig

ARTIFACTS = Path(__file__).resolve().parents[1] / ".artifacts"
# modules whose source changes invalidate trained artifacts
TRAINING_SOURCES = ("_layers", "ans", "audio", "backbone", "checkpoint", "codec", "data", "pipeline", "speechae")
ACCEPTANCE_LINES: list[str] = []


def tiny_config(**changes) -> pipeline.ExperimentConfig:
    """A few-second end-to-end setup: 3 latent frames per clip, small nets."""
    cfg = pipeline.ExperimentConfig(
        codec=CodecConfig(hidden=16),
        backbone=BackboneConfig(blocks=1, width=32, heads=2),
        corpus_clips=6,
        corpus_frames=41,
        clip_frames=17,
        codec_epochs=1,
        speechae_epochs=1,
        stage2_steps=5,
        stage2_lr=1e-3,
        batch_size=4,
    )
    return cfg.replace(**changes)


@pytest.fixture(scope="session")
def tiny_corpus():
    cfg = tiny_config()
    return data.corpus_in_memory(cfg.corpus_clips, seed=cfg.corpus_seed, n_frames=cfg.corpus_frames)


@pytest.fixture(scope="session")
def tiny_stage1(tiny_corpus):
    return pipeline.train_stage1(tiny_config(), tiny_corpus)


@pytest.fixture(scope="session")
def tiny_stage2(tiny_corpus, tiny_stage1):
    return pipeline.train_stage2(tiny_config(), tiny_stage1, tiny_corpus, log_every=0)


# ------------------------------------------------------------- desk-scale artifacts

TRAIN_SEEDS = (0, 1, 2)


def artifact_dir(cfg: pipeline.ExperimentConfig) -> Path:
    h = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    src = Path(lipflow.__file__).parent
    for name in TRAINING_SOURCES:
        h.update((src / f"{name}.py").read_bytes())
    return ARTIFACTS / h.hexdigest()[:16]


def desk_family() -> dict[str, list[Path]]:
    """Every ablation arm at desk scale, trained once and cached on disk.

    Three training seeds for the SpeechAE arms, one for no-ans.
    """
    base = pipeline.desk_config()
    out = artifact_dir(base)
    expected = [out / f"{a}_seed{s}.ckpt" for a in ("full", "no-pretrain", "no-speechae") for s in TRAIN_SEEDS]
    corpus = None
    if not all(p.exists() for p in expected + [out / "no-ans_seed0.ckpt"]):
        corpus = data.corpus_in_memory(base.corpus_clips, seed=base.corpus_seed, n_frames=base.corpus_frames,
                                       H=base.height, W=base.width, features=pipeline.feature_config(base))
    family = evalbench.train_family(base, out, ("full", "no-pretrain", "no-speechae"), TRAIN_SEEDS, corpus,
                                    log_every=500)
    family.update(evalbench.train_family(base, out, ("no-ans",), (0,), corpus, log_every=500))
    return family


@pytest.fixture(scope="session")
def family():
    return desk_family()


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
