import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipflow import ans, evalbench as eb
from lipflow.checkpoint import CheckpointError

from conftest import tiny_config


# ------------------------------------------------------------- boundary score


def test_boundary_score_examples():
    v = np.zeros((6, 2, 2, 3))
    v[3:] = 0.5
    assert eb.boundary_score(v, [3]) == pytest.approx(0.5)
    ramp = np.arange(6, dtype=float)[:, None, None, None] * np.ones((6, 2, 2, 3)) * 0.1
    assert eb.boundary_score(ramp, [2, 4]) == pytest.approx(0.0, abs=1e-12)
    assert eb.frame_differences(ramp) == pytest.approx([0.1] * 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-2, 2))
def test_boundary_score_ignores_a_constant_offset(seed, offset):
    v = np.random.default_rng(seed).random((8, 4, 4, 3))
    assert eb.boundary_score(v + offset, [3, 6]) == pytest.approx(eb.boundary_score(v, [3, 6]), abs=1e-9)


def test_boundary_score_errors():
    v = np.zeros((4, 2, 2, 3))
    for seams in ([], [0], [4]):
        with pytest.raises(ValueError):
            eb.boundary_score(v, seams)
    with pytest.raises(ValueError):
        eb.frame_differences(v[:1])


def test_pixel_seams():
    plan = ans.segment_clips(7, 3)
    assert eb.pixel_seams(plan, 8) == [17, 33]
    assert eb.pixel_seams(plan, 8, n_pixel_frames=20) == [17]


# ------------------------------------------------------------- sync proxy


def _mouth_video(levels):
    v = np.full((len(levels), 8, 8, 3), 0.3)
    v[:, 2:4, 2:6] = np.asarray(levels)[:, None, None, None]
    return v


def test_sync_proxy_signs():
    env = 0.5 + 0.5 * np.sin(np.linspace(0, 12, 60))
    mouth = (2, 2, 2, 4)
    assert eb.sync_proxy(_mouth_video(env), env, mouth) == pytest.approx(1.0)
    assert eb.sync_proxy(_mouth_video(1 - env), env, mouth) == pytest.approx(-1.0)


def test_sync_proxy_random_video_is_near_zero():
    rng = np.random.default_rng(0)
    env = rng.random(5000)
    assert abs(eb.sync_proxy(rng.random((5000, 4, 4, 3)), env, (0, 0, 4, 4))) < 0.1


def test_sync_proxy_errors():
    env = np.linspace(0, 1, 10)
    with pytest.raises(eb.UndefinedCorrelation):
        eb.sync_proxy(np.zeros((10, 4, 4, 3)), env, (0, 0, 2, 2))
    with pytest.raises(ValueError):
        eb.sync_proxy(np.zeros((9, 4, 4, 3)), env, (0, 0, 2, 2))


# ------------------------------------------------------------- frechet


def test_frechet_identical_stats_is_zero():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 5))
    assert eb.latent_frechet(x, x) == pytest.approx(0.0, abs=1e-8)


def test_frechet_mean_shift_equals_dimension():
    d = 6
    eye = np.eye(d)
    assert eb.frechet_from_stats(np.zeros(d), eye, np.ones(d), eye) == pytest.approx(d, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_frechet_diagonal_oracle_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    d = 4
    mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
    va, vb = rng.uniform(0.1, 3, d), rng.uniform(0.1, 3, d)
    got = eb.frechet_from_stats(mu_a, np.diag(va), mu_b, np.diag(vb), eps=0.0)
    oracle = np.sum((mu_a - mu_b) ** 2) + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2)
    assert got == pytest.approx(oracle, rel=1e-9, abs=1e-9)
    assert eb.frechet_from_stats(mu_b, np.diag(vb), mu_a, np.diag(va), eps=0.0) == pytest.approx(got, rel=1e-9, abs=1e-9)


def test_frechet_full_covariance_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    ca, cb = a @ a.T + np.eye(3), b @ b.T + np.eye(3)
    w, v = np.linalg.eig(ca @ cb)
    oracle = np.trace(ca) + np.trace(cb) - 2 * np.sqrt(w.real).sum()
    assert eb.frechet_from_stats(np.zeros(3), ca, np.zeros(3), cb, eps=0.0) == pytest.approx(oracle, rel=1e-8)


def test_frechet_errors():
    with pytest.raises(ValueError):
        eb.latent_frechet(np.zeros((5, 3)), np.zeros((5, 4)))
    with pytest.raises(ValueError):
        eb.latent_frechet(np.zeros((1, 3)), np.zeros((5, 3)))


# ------------------------------------------------------------- small helpers


def test_relative_drift_and_linearity():
    assert eb.relative_drift(2.0, 2.0) == 0.0
    assert eb.relative_drift(1.5, 2.0) == pytest.approx(0.25)
    assert eb.linearity_error([4, 5, 6], [4.0, 5.0, 6.0]) == pytest.approx(0.0, abs=1e-12)
    # symmetric bump about a known line: fit 1 + x, residuals (-1/3, 2/3, -1/3) * 0.3
    err = eb.linearity_error([1, 2, 3], [2.0 - 0.1, 3.0 + 0.2, 4.0 - 0.1])
    assert err == pytest.approx(0.2 / 3.0)
    with pytest.raises(ValueError):
        eb.linearity_error([1], [1.0])


def test_arm_config():
    base = tiny_config()
    assert eb.arm_config(base, "full") == base
    assert eb.arm_config(base, "no-pretrain").pretrain_speechae is False
    assert eb.arm_config(base, "no-speechae").speech_encoder == "linear"
    assert eb.arm_config(base, "no-ans").async_noise is False
    with pytest.raises(ValueError):
        eb.arm_config(base, "no-codec")


def test_report_validation_and_files(tmp_path):
    rep = eb.EvalReport("t", [{"a": 1, "b": 0.5, "c": [1, 2]}, {"a": 2, "b": 0.25}], seeds=[0],
                        runtime={"s": 1.0}, notes=["hello"])
    rep.validate()
    out = rep.write(tmp_path)
    rows = list(csv.DictReader(open(out / "t.csv")))
    assert [r["a"] for r in rows] == ["1", "2"] and rows[0]["c"] == "[1, 2]"
    text = (out / "t.txt").read_text()
    assert eb.PROXY_NOTE in text and "hello" in text
    with pytest.raises(ValueError):
        eb.EvalReport("bad", [{"a": math.nan}]).validate()
    with pytest.raises(ValueError):
        eb.EvalReport("bad", [], runtime={"s": 0.0}).validate()


# ------------------------------------------------------------- experiment drivers on the tiny model


def test_oracle_long_horizon_has_zero_drift(tiny_stage2):
    rep = eb.long_horizon_eval(tiny_stage2, n_clips=2, oracle=True)
    assert rep.column("clips") == [1, 4, 8]
    for m in ("sync_proxy", "latent_frechet", "boundary_score"):
        assert rep.column(f"{m}_drift") == [0.0, 0.0, 0.0]
    # every length reproduces the same encoded ground truth
    assert len(set(rep.column("latent_frechet"))) == 1


def test_long_horizon_rows(tiny_stage2):
    sampler = ans.SamplerConfig(steps=2)
    rep = eb.long_horizon_eval(tiny_stage2, clip_counts=(1, 2), n_clips=1, sampler=sampler)
    assert rep.column("clips") == [1, 2] and rep.column("latent_frames") == [3, 5]
    assert rep.rows[0]["sync_proxy_drift"] == 0.0
    assert "seam_score" in rep.rows[1]
    with pytest.raises(ValueError):
        eb.long_horizon_eval(tiny_stage2, clip_counts=(2, 4), n_clips=1, sampler=sampler)


def test_untrained_checkpoint_is_refused(tiny_stage1):
    with pytest.raises(CheckpointError):
        eb.long_horizon_eval(tiny_stage1, n_clips=1)


def test_runtime_sweep_table(tiny_stage2, tmp_path):
    rep = eb.runtime_sweep(tiny_stage2, n_clips=1, max_clips=1, reps=1, rounds=1, plot=tmp_path / "p.png")
    assert len(rep.rows) == 14
    assert [(r["cfg_mode"], r["steps"]) for r in rep.rows] == \
        [(m, n) for m in ("joint", "split") for n in range(4, 11)]
    for r in rep.rows:
        assert r["calls"] == (2 if r["cfg_mode"] == "joint" else 3) * (r["steps"] - 1)
        assert r["backbone_seconds"] > 0 and r["total_seconds"] >= r["backbone_seconds"]
    assert {"joint_linearity_error", "split_linearity_error"} <= rep.runtime.keys()
    assert (tmp_path / "p.png").stat().st_size > 0
    rep.write(tmp_path / "out")
    assert len(list(csv.DictReader(open(tmp_path / "out" / "runtime_sweep.csv")))) == 14


def test_cfg_work_ratio_calls(tiny_stage2):
    _, system = eb._system(tiny_stage2)
    evalset = eb.make_eval_set(system, 1, 1)
    res = eb.cfg_work_ratio(system, evalset, steps=3, reps=1, rounds=1)
    assert (res["joint_calls"], res["split_calls"]) == (4, 6)
    assert res["ratio"] > 0 and len(res["block_ratios"]) == 1


def test_ablate_rows(tiny_stage2):
    family = {"full": [tiny_stage2], "no-ans": [tiny_stage2]}
    rep = eb.ablate(family, arms=("full", "no-ans"), n_clips=1, clips=2, gen_seeds=(0, 1),
                    sampler=ans.SamplerConfig(steps=2))
    assert len(rep.rows) == 6
    med = eb.arm_medians(rep)
    assert set(med) == {"full", "no-ans"}
    full = [r for r in rep.rows if r["arm"] == "full" and r["gen_seed"] != "median"]
    assert med["full"]["sync_proxy"] == pytest.approx(np.median([r["sync_proxy"] for r in full]))
    with pytest.raises(CheckpointError):
        eb.ablate(family, arms=("full", "no-pretrain"))


def test_train_family_shares_codec_and_resumes(tiny_corpus, tmp_path):
    from lipflow.checkpoint import load_checkpoint

    base = tiny_config(codec_epochs=0, speechae_epochs=0, stage2_steps=1)
    fam = eb.train_family(base, tmp_path, seeds=(0, 1), corpus=tiny_corpus)
    assert set(fam) == set(eb.ARMS) and all(len(v) == 2 for v in fam.values())
    ckpts = {a: [load_checkpoint(p) for p in v] for a, v in fam.items()}
    codec = {k: v for k, v in ckpts["full"][0].arrays.items() if k.startswith("codec/")}
    for arm, cks in ckpts.items():
        for ck in cks:
            assert all(np.array_equal(ck.arrays[k], v) for k, v in codec.items()), arm
    assert ckpts["no-speechae"][0].namespaces() == {"codec", "speech_projection", "backbone"}
    assert ckpts["no-ans"][0].config["async_noise"] is False
    assert [ck.config["seed"] for ck in ckpts["full"]] == [0, 1]
    assert ckpts["full"][0].digest() != ckpts["full"][1].digest()
    stamps = {p: p.stat().st_mtime_ns for p in tmp_path.iterdir()}
    again = eb.train_family(base, tmp_path, seeds=(0, 1), corpus=tiny_corpus)
    assert again == fam and stamps == {p: p.stat().st_mtime_ns for p in tmp_path.iterdir()}
    with pytest.raises(ValueError):
        eb.train_family(base, tmp_path, arms=("nope",), corpus=tiny_corpus)


def test_ablate_rejects_mixed_codecs(tiny_stage2):
    from lipflow.checkpoint import Checkpoint

    other = Checkpoint(dict(tiny_stage2.arrays), tiny_stage2.metadata, tiny_stage2.config)
    key = next(k for k in other.arrays if k.startswith("codec/"))
    other.arrays[key] = other.arrays[key] + 1
    with pytest.raises(ValueError):
        eb.ablate({"full": [tiny_stage2], "no-ans": [other]}, arms=("full", "no-ans"), n_clips=1, clips=2,
                  sampler=ans.SamplerConfig(steps=2))
