import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lipflow import ans
from lipflow.codec import ShapeError

SHAPE = (2, 2, 3)  # (h, w, c) of the toy latents used here


def rand(*shape, seed=0, dtype=torch.float64):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


class CountingDenoiser:
    """Wraps a denoiser, counting calls and recording which conditions were passed."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.conds = []

    def begin_clip(self, step, clip):
        if hasattr(self.inner, "begin_clip"):
            self.inner.begin_clip(step, clip)

    def __call__(self, z, speech, reference, t_vec):
        self.calls += 1
        self.conds.append((speech is not None, reference is not None))
        return self.inner(z, speech, reference, t_vec)


def smooth_denoiser(z, speech, reference, t_vec):
    # any deterministic field works for the bookkeeping tests
    return torch.tanh(z) * (1 + t_vec.reshape(-1, 1, 1, 1)) + 0.1


# ------------------------------------------------------------- timestep draws


def test_async_timesteps_degenerate_sigma():
    assert ans.sample_async_timesteps(0.0, 0.0, 1.0, np.random.default_rng(0)) == (0.5, 0.5)


def test_async_timesteps_symmetric_mean_and_range():
    rng = np.random.default_rng(1)
    draws = np.array([ans.sample_async_timesteps(0.0, 1.0, 1.0, rng) for _ in range(100_000)])
    assert np.all(draws[:, 0] <= draws[:, 1])
    assert np.all((draws > 0) & (draws < 1))
    # each unsorted draw has mean 1/2, so the pair average does too
    assert abs(draws.mean() - 0.5) < 0.01


def test_async_timesteps_shift_matches_formula():
    u = 1 / (1 + math.exp(-0.3))
    t1, t2 = ans.sample_async_timesteps(0.3, 0.0, 3.0, np.random.default_rng(0))
    assert t1 == t2 == pytest.approx(3 * u / (1 + 2 * u), abs=1e-15)


def test_async_timesteps_batch_sorted():
    t1, t2 = ans.sample_async_timesteps_batch(5000, 0.0, 1.0, 1.0, torch.Generator().manual_seed(0))
    assert (t1 <= t2).all() and (t1 > 0).all() and (t2 < 1).all()


@pytest.mark.parametrize("sigma, shift", [(-0.1, 1.0), (1.0, 0.0)])
def test_async_timesteps_rejects_bad_params(sigma, shift):
    with pytest.raises(ValueError):
        ans.sample_async_timesteps(0.0, sigma, shift, np.random.default_rng(0))


# ------------------------------------------------------------- t-vectors


def test_train_tvec_step_pattern():
    t = ans.build_train_tvec(3, 0.2, 0.7)
    assert torch.equal(t, torch.tensor([0.0, 0.2, 0.7, 0.7], dtype=torch.float64))


def test_train_tvec_synchronous_and_zero():
    assert torch.equal(ans.build_train_tvec(4, 0.4, 0.4), torch.tensor([0.0, 0.4, 0.4, 0.4, 0.4], dtype=torch.float64))
    assert torch.equal(ans.build_train_tvec(4, 0.0, 0.0), torch.zeros(5, dtype=torch.float64))


def test_train_tvec_interpolated_and_batched():
    t = ans.build_train_tvec(5, 0.2, 0.6, mode="interpolated")
    assert torch.allclose(t, torch.tensor([0.0, 0.2, 0.3, 0.4, 0.5, 0.6], dtype=torch.float64))
    tb = ans.build_train_tvec(3, torch.tensor([0.1, 0.2]), torch.tensor([0.5, 0.9]))
    assert tb.shape == (2, 4)
    assert torch.allclose(tb[1], torch.tensor([0.0, 0.2, 0.9, 0.9]))


@pytest.mark.parametrize("f, t1, t2", [(3, 0.8, 0.2), (3, -0.1, 0.5), (3, 0.2, 1.2), (1, 0.1, 0.2)])
def test_train_tvec_errors(f, t1, t2):
    with pytest.raises(ValueError):
        ans.build_train_tvec(f, t1, t2)


# ------------------------------------------------------------- forward process


def test_add_noise_zero_and_one():
    z0, eps = rand(4, *SHAPE), rand(4, *SHAPE, seed=1)
    assert torch.equal(ans.add_noise_async(z0, torch.zeros(4, dtype=torch.float64), eps), z0)
    zt = ans.add_noise_async(z0, torch.tensor([0.0, 1.0, 1.0, 1.0], dtype=torch.float64), eps)
    assert torch.equal(zt[0], z0[0])
    assert torch.equal(zt[1:], eps[1:])


def test_add_noise_arithmetic():
    z0 = torch.zeros(3, *SHAPE, dtype=torch.float64)
    z0[0] = 7.0
    zt = ans.add_noise_async(z0, torch.tensor([0.0, 0.25, 0.75], dtype=torch.float64), torch.ones(3, *SHAPE, dtype=torch.float64))
    assert torch.equal(zt[0], z0[0])
    assert (zt[1] == 0.25).all() and (zt[2] == 0.75).all()


def test_add_noise_accepts_noise_without_reference_slot():
    z0, eps = rand(4, *SHAPE), rand(3, *SHAPE, seed=1)
    t = torch.tensor([0.0, 0.3, 0.6, 0.9], dtype=torch.float64)
    full = torch.cat([torch.zeros(1, *SHAPE, dtype=torch.float64), eps])
    assert torch.equal(ans.add_noise_async(z0, t, eps), ans.add_noise_async(z0, t, full))


def test_add_noise_errors():
    z0 = rand(3, *SHAPE)
    with pytest.raises(ShapeError):
        ans.add_noise_async(z0, torch.zeros(3, dtype=torch.float64), rand(5, *SHAPE))
    with pytest.raises(ValueError):
        ans.add_noise_async(z0, torch.tensor([0.0, 0.5, 1.5], dtype=torch.float64), z0)
    with pytest.raises(ValueError):
        ans.add_noise_async(z0, torch.tensor([0.1, 0.5, 0.5], dtype=torch.float64), z0)
    with pytest.raises(ShapeError):
        ans.add_noise_async(z0, torch.zeros(4, dtype=torch.float64), z0)


def test_fm_target():
    z0, eps = rand(3, *SHAPE), rand(3, *SHAPE, seed=1)
    assert (ans.fm_target(z0, z0) == 0).all()
    assert torch.equal(ans.fm_target(torch.zeros_like(eps), eps), eps)
    expected = eps.numpy() - z0.numpy()
    assert np.array_equal(ans.fm_target(z0, eps).numpy(), expected)
    with pytest.raises(ShapeError):
        ans.fm_target(z0, eps[:2])


def test_fm_loss_values():
    v = rand(2, 4, *SHAPE)
    mask = torch.tensor([False, True, True, True])
    assert ans.fm_loss(v, v, mask).item() == 0.0
    shifted = v.clone()
    shifted[:, 1:] += 1  # the masked reference slot may differ arbitrarily
    shifted[:, 0] += 100
    assert ans.fm_loss(shifted, v, mask).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        ans.fm_loss(v, v, torch.zeros(4, dtype=torch.bool))


def test_fm_loss_matches_direct_sum():
    a, b = rand(2, 4, *SHAPE), rand(2, 4, *SHAPE, seed=3)
    mask = torch.tensor([[False, True, False, True], [False, True, True, True]])
    sq, n = 0.0, 0
    for bi in range(2):
        for fi in range(4):
            if mask[bi, fi]:
                sq += float(((a[bi, fi] - b[bi, fi]) ** 2).mean())
                n += 1
    assert ans.fm_loss(a, b, mask).item() == pytest.approx(sq / n, rel=1e-12)


# ------------------------------------------------------------- Euler step


def test_euler_identity_when_levels_equal():
    z, v = rand(3, *SHAPE), rand(3, *SHAPE, seed=1)
    t = torch.tensor([0.0, 0.4, 0.4], dtype=torch.float64)
    assert torch.equal(ans.euler_update(z, v, t, t), z)


def test_euler_one_step_recovery():
    z = torch.full((2, *SHAPE), 0.5, dtype=torch.float64)
    v = torch.ones_like(z)
    out = ans.euler_update(z, v, torch.tensor([0.0, 0.5], dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    assert torch.equal(out[1], torch.zeros(SHAPE, dtype=torch.float64))
    assert torch.equal(out[0], z[0])


def test_euler_heterogeneous_levels_recover():
    z0, eps = rand(3, *SHAPE), rand(3, *SHAPE, seed=1)
    t = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
    zt = ans.add_noise_async(z0, t, eps)
    out = ans.euler_update(zt, ans.fm_target(z0, eps), t, torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(out, z0, atol=1e-15, rtol=0)


def test_euler_rejects_increasing_time():
    z = rand(2, *SHAPE)
    with pytest.raises(ValueError):
        ans.euler_update(z, z, torch.tensor([0.0, 0.2], dtype=torch.float64), torch.tensor([0.0, 0.5], dtype=torch.float64))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=9), st.integers(0, 2**31 - 1))
def test_path_identity_property(levels, seed):
    f = len(levels)
    z0, eps = rand(f + 1, *SHAPE, seed=seed), rand(f + 1, *SHAPE, seed=seed + 1)
    t = torch.tensor([0.0, *levels], dtype=torch.float64)
    zt = ans.add_noise_async(z0, t, eps)
    out = ans.euler_update(zt, ans.fm_target(z0, eps), t, torch.zeros_like(t))
    assert (out - z0).abs().max().item() <= 1e-10


# ------------------------------------------------------------- clip plans and schedules


def test_segment_clips_examples():
    assert ans.segment_clips(16, 16).n_clips == 1
    plan = ans.segment_clips(31, 16)
    assert plan.n_clips == 2
    # 0-based over the generated frames; index 15 here is latent index 16 with z_R in front
    assert plan.ranges == ((0, 16), (15, 31))
    with pytest.raises(ValueError, match="nearest valid length is 31"):
        ans.segment_clips(30, 16)


@given(st.integers(2, 12), st.integers(1, 10))
def test_segment_clips_property(f, k):
    n = k * (f - 1) + 1
    plan = ans.segment_clips(n, f)
    assert plan.n_clips == k
    assert plan.ranges[0][0] == 0 and plan.ranges[-1][1] == n
    for (s, e), (s2, e2) in zip(plan.ranges, plan.ranges[1:]):
        assert e - s == f and s2 == e - 1
    assert ans.valid_length(n, f) == n
    # one frame short rounds back up, except when every length is valid (f = 2)
    assert ans.valid_length(n - 1, f) == (n - 1 if f == 2 and k > 1 else n)


def test_schedule_uniform_and_shifted():
    assert torch.allclose(ans.make_schedule(5), torch.tensor([1.0, 0.75, 0.5, 0.25, 0.0], dtype=torch.float64))
    s = ans.make_schedule(8, shift=3.0)
    ans.check_schedule(s)
    assert s[0] == 1 and s[-1] == 0
    with pytest.raises(ValueError):
        ans.make_schedule(1)
    with pytest.raises(ValueError):
        ans.check_schedule(torch.tensor([1.0, 0.5, 0.5, 0.0]))
    with pytest.raises(ValueError):
        ans.check_schedule(torch.tensor([0.9, 0.5, 0.0]))


# ------------------------------------------------------------- guidance


def test_cfg_joint_examples():
    u, c = torch.full((3,), 2.0), torch.full((3,), 5.0)
    assert torch.equal(ans.cfg_joint(u, c, 1.0), c)
    assert torch.equal(ans.cfg_joint(u, c, 0.0), u)
    assert torch.equal(ans.cfg_joint(u, c, 2.0), 2 * c - u)


def test_cfg_split_examples():
    u, r, c = torch.full((3,), 2.0), torch.full((3,), 3.0), torch.full((3,), 5.0)
    assert torch.equal(ans.cfg_split(u, r, c, 0.0, 1.0), c)
    assert torch.equal(ans.cfg_split(u, r, c, 1.0, 0.0), r)
    assert torch.equal(ans.cfg_split(u, r, c, 2.0, 6.0), -7 * u + 2 * r + 6 * c)
    with pytest.raises(ShapeError):
        ans.cfg_split(u, r, c[:2], 2.0, 6.0)


@pytest.mark.parametrize("mode, conds", [
    ("none", [(True, True)]),
    ("joint", [(False, False), (True, True)]),
    ("split", [(False, False), (False, True), (True, True)]),
])
def test_guided_velocity_branches(mode, conds):
    den = CountingDenoiser(smooth_denoiser)
    z = rand(3, *SHAPE)
    ans.guided_velocity(den, z, torch.zeros(2), z[0], torch.tensor([0.0, 0.5, 0.5]), ans.SamplerConfig(cfg_mode=mode))
    assert den.conds == conds
    assert den.calls == ans.calls_per_clip_step(ans.SamplerConfig(cfg_mode=mode))


def test_guided_velocity_keeps_reference_when_asked():
    den = CountingDenoiser(smooth_denoiser)
    z = rand(3, *SHAPE)
    cfg = ans.SamplerConfig(cfg_mode="joint", drop_reference_in_uncond=False)
    ans.guided_velocity(den, z, torch.zeros(2), z[0], torch.tensor([0.0, 0.5, 0.5]), cfg)
    assert den.conds == [(False, True), (True, True)]


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        ans.SamplerConfig(steps=1)
    with pytest.raises(ValueError):
        ans.SamplerConfig(cfg_mode="both")
    with pytest.raises(ValueError):
        ans.SamplerConfig(sigma=-1)


# ------------------------------------------------------------- the multi-clip sampler


def oracle_setup(k, f, seed, dtype=torch.float64):
    n = k * (f - 1) + 1
    z0 = rand(n, *SHAPE, seed=seed, dtype=dtype)
    z_ref = rand(*SHAPE, seed=seed + 100, dtype=dtype)
    return z0, z_ref, ans.OracleDenoiser(z0, f, z_ref)


@pytest.mark.parametrize("k", [1, 2, 4])
@pytest.mark.parametrize("n", [2, 8])
@pytest.mark.parametrize("mode", ["none", "joint", "split"])
def test_oracle_recovery(k, n, mode):
    f = 4
    for seed in range(3):
        z0, z_ref, oracle = oracle_setup(k, f, seed)
        den = CountingDenoiser(oracle)
        cfg = ans.SamplerConfig(cfg_mode=mode, steps=n)
        out = ans.generate(den, None, z_ref, ans.make_schedule(n), cfg, f, n_frames=len(z0),
                           gen=torch.Generator().manual_seed(seed))
        assert out.has_reference and out.n_frames == len(z0) + 1
        assert (out.data[1:] - z0).abs().max().item() <= 1e-12
        assert den.calls == ans.calls_per_clip_step(cfg) * k * (n - 1)


def test_single_step_single_clip_is_exact():
    z0, z_ref, oracle = oracle_setup(1, 5, 0)
    out = ans.generate(oracle, None, z_ref, ans.make_schedule(2), ans.SamplerConfig(cfg_mode="none"), 5, n_frames=5,
                       gen=torch.Generator().manual_seed(0))
    assert torch.allclose(out.data[1:], z0, atol=1e-15, rtol=0)


def test_oracle_recovery_on_shifted_schedule():
    z0, z_ref, oracle = oracle_setup(3, 4, 9)
    out = ans.generate(oracle, None, z_ref, ans.make_schedule(6, shift=3.0), ans.SamplerConfig(), 4, n_frames=len(z0),
                       gen=torch.Generator().manual_seed(0))
    assert (out.data[1:] - z0).abs().max().item() <= 1e-12


def test_generate_concat_oracle_and_calls():
    z0, z_ref, oracle = oracle_setup(3, 4, 2)
    den = CountingDenoiser(oracle)
    out = ans.generate_concat(den, None, z_ref, ans.make_schedule(5), ans.SamplerConfig(cfg_mode="joint"), 4,
                              n_frames=len(z0), gen=torch.Generator().manual_seed(0))
    assert (out.data[1:] - z0).abs().max().item() <= 1e-12
    assert den.calls == 2 * 3 * 4


@pytest.mark.parametrize("k", [1, 2, 4])
def test_noise_level_bookkeeping(k):
    f, n = 4, 6
    T = ans.make_schedule(n)
    events = []
    ans.generate(smooth_denoiser, None, rand(*SHAPE), T, ans.SamplerConfig(cfg_mode="none"), f,
                 n_frames=k * (f - 1) + 1, gen=torch.Generator().manual_seed(0), hook=events.append)
    assert [(e.step, e.clip) for e in events] == [(i, j) for i in range(n - 1) for j in range(k)]
    for e in events:
        i = e.step
        assert e.t_from[0] == 0 and e.t_to[0] == 0
        if e.clip == 0:
            assert (e.t_from[1:] == T[i]).all()
            assert (e.t_to[1:] == T[i + 1]).all()
        else:
            assert e.t_from[1] == T[i + 1]
            assert (e.t_from[2:] == T[i]).all()
            assert (e.t_to[2:] == T[i + 1]).all()


def test_motion_frame_comes_from_previous_clip():
    f, events = 4, []
    ans.generate(smooth_denoiser, None, rand(*SHAPE), ans.make_schedule(5), ans.SamplerConfig(cfg_mode="none"), f,
                 n_frames=3 * (f - 1) + 1, gen=torch.Generator().manual_seed(0), hook=events.append)
    by_key = {(e.step, e.clip): e for e in events}
    for (i, j), e in by_key.items():
        if j > 0:
            prev = by_key[i, j - 1]
            assert torch.equal(e.state_in[1], prev.state_out[-1])


@pytest.mark.parametrize("sampler", [ans.generate, ans.generate_concat])
def test_clip_coherence_and_reference_immutability(sampler):
    f, k = 5, 4
    z_ref = rand(*SHAPE, seed=5)
    ref_copy = z_ref.clone()
    events = []
    out = sampler(smooth_denoiser, None, z_ref, ans.make_schedule(8), ans.SamplerConfig(), f,
                  n_frames=k * (f - 1) + 1, gen=torch.Generator().manual_seed(1), hook=events.append)
    assert torch.equal(z_ref, ref_copy)
    assert torch.equal(out.data[0], ref_copy)
    for e in events:
        assert torch.equal(e.state_in[0], ref_copy) and torch.equal(e.state_out[0], ref_copy)
    # the assembled sequence holds one copy of every overlap frame, shared by both clips
    plan = ans.segment_clips(k * (f - 1) + 1, f)
    clips = [out.data[1:][s:e] for s, e in plan.ranges]
    for a, b in zip(clips, clips[1:]):
        assert torch.equal(a[-1], b[0])


def test_final_step_outputs_agree_on_overlap():
    f, k, n = 4, 3, 6
    last = {}
    out = ans.generate(smooth_denoiser, None, rand(*SHAPE), ans.make_schedule(n), ans.SamplerConfig(cfg_mode="joint"),
                       f, n_frames=k * (f - 1) + 1, gen=torch.Generator().manual_seed(3),
                       hook=lambda e: last.__setitem__(e.clip, e) if e.step == n - 2 else None)
    plan = ans.segment_clips(k * (f - 1) + 1, f)
    for j, (s, e) in enumerate(plan.ranges):
        assert torch.equal(out.data[1 + s + 1:1 + e], last[j].state_out[2:])
    assert torch.equal(out.data[1:1 + f], last[0].state_out[1:])


def plain_flow_matching(denoiser, z_ref, schedule, f, gen):
    """Independent vanilla Euler sampler with one shared noise level per step."""
    z = torch.randn((f, *z_ref.shape), generator=gen, dtype=z_ref.dtype)
    T = schedule.tolist()
    for i in range(len(T) - 1):
        t = torch.tensor([0.0] + [T[i]] * f, dtype=z_ref.dtype)
        full = torch.cat([z_ref[None], z])
        v = denoiser(full, None, z_ref, t)[1:]
        z = z + (T[i + 1] - T[i]) * v
    return z


def test_single_clip_reduces_to_plain_flow_matching():
    f, z_ref = 6, rand(*SHAPE, seed=2)
    sched = ans.make_schedule(7)
    ours = ans.generate(smooth_denoiser, None, z_ref, sched, ans.SamplerConfig(cfg_mode="none"), f, n_frames=f,
                        gen=torch.Generator().manual_seed(11))
    plain = plain_flow_matching(smooth_denoiser, z_ref, sched, f, torch.Generator().manual_seed(11))
    assert torch.allclose(ours.data[1:], plain, atol=1e-14, rtol=0)


def test_generate_is_deterministic():
    args = (smooth_denoiser, None, rand(*SHAPE), ans.make_schedule(5), ans.SamplerConfig(), 4)
    a = ans.generate(*args, n_frames=10, gen=torch.Generator().manual_seed(4))
    b = ans.generate(*args, n_frames=10, gen=torch.Generator().manual_seed(4))
    assert torch.equal(a.data, b.data)


def test_generate_diagnoses_bad_denoisers():
    z_ref = rand(*SHAPE)
    with pytest.raises(FloatingPointError, match="step 0, clip 0"):
        ans.generate(lambda z, s, r, t: torch.full_like(z, float("nan")), None, z_ref, ans.make_schedule(3),
                     ans.SamplerConfig(cfg_mode="none"), 4, n_frames=4)
    with pytest.raises(ShapeError):
        ans.generate(lambda z, s, r, t: z[1:], None, z_ref, ans.make_schedule(3),
                     ans.SamplerConfig(cfg_mode="none"), 4, n_frames=4)
    with pytest.raises(ValueError, match="nearest valid"):
        ans.generate(smooth_denoiser, None, z_ref, ans.make_schedule(3), ans.SamplerConfig(), 4, n_frames=6)
    with pytest.raises(ValueError):
        ans.generate(smooth_denoiser, None, z_ref, ans.make_schedule(3), ans.SamplerConfig(), 4)


def test_generate_passes_aligned_speech_windows():
    f, k = 4, 3
    n = k * (f - 1) + 1
    speech = torch.arange(n, dtype=torch.float64).reshape(n, 1, 1)
    seen = []

    def den(z, s, r, t):
        if s is not None:
            seen.append(s[:, 0, 0].tolist())
        return torch.zeros_like(z)

    ans.generate(den, speech, rand(*SHAPE), ans.make_schedule(2), ans.SamplerConfig(cfg_mode="joint"), f)
    assert seen == [[0, 1, 2, 3], [3, 4, 5, 6], [6, 7, 8, 9]]
