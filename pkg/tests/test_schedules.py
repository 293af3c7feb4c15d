import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from moviekit import schedules as S


@pytest.fixture(scope="module")
def vp():
    return S.make_schedule("vp-linear", 1000)


def test_vp_identity(vp):
    assert np.max(np.abs(vp.alphas**2 + vp.sigmas**2 - 1)) < 1e-6
    # beta grid oracle
    betas = np.linspace(1e-4, 2e-2, 1000)
    np.testing.assert_allclose(vp.alphas**2, np.cumprod(1 - betas), rtol=1e-12)


def test_noise_monotone(vp):
    assert np.all(np.diff(vp.sigmas) > 0)
    eu = S.make_schedule("euler-discrete", 8)
    assert np.all(np.diff(eu.sigmas) > 0)
    assert eu.sigmas[0] == pytest.approx(0.1) and eu.sigmas[-1] == pytest.approx(10.0)
    assert np.all(eu.alphas == 1.0)


def test_lcm_indices():
    s = S.make_schedule("lcm-uniform", 5)
    np.testing.assert_array_equal(s.timesteps, [199, 399, 599, 799, 999])
    vp = S.make_schedule("vp-linear", 1000)
    np.testing.assert_allclose(s.alphas, vp.alphas[[199, 399, 599, 799, 999]])


def test_euler_timesteps_follow_parent_sigma():
    eu = S.make_schedule("euler-discrete", 8)
    vp = S.make_schedule("vp-linear", 1000)
    ve = vp.sigmas / vp.alphas
    for t in range(8):
        k = eu.timesteps[t]
        lo = int(np.floor(k))
        # the parent VE sigma around the mapped time brackets the level
        assert ve[lo] <= eu.sigmas[t] * (1 + 1e-9) <= ve[min(lo + 1, 999)] * (1 + 1e-9)


@pytest.mark.parametrize("bad", [0, -3, 2.5])
def test_bad_steps(bad):
    with pytest.raises(ValueError):
        S.make_schedule("vp-linear", bad)


def test_bad_kind():
    with pytest.raises(ValueError):
        S.make_schedule("cosine", 10)


def test_add_noise_endpoints():
    clean = S.NoiseSchedule("vp-linear", 2, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    x0, eps = torch.randn(3, 4), torch.randn(3, 4)
    assert torch.equal(S.add_noise(x0, eps, 0, clean), x0)
    assert torch.equal(S.add_noise(x0, eps, 1, clean), eps)


def test_add_noise_errors(vp):
    with pytest.raises(ValueError):
        S.add_noise(torch.zeros(2), torch.zeros(3), 0, vp)
    with pytest.raises(IndexError):
        S.add_noise(torch.zeros(2), torch.zeros(2), 1000, vp)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 999), st.integers(0, 2**31 - 1))
def test_add_noise_superposition(t, seed):
    vp = S.make_schedule("vp-linear", 1000)
    g = torch.Generator().manual_seed(seed)
    a, b, e1, e2 = (torch.randn(5, generator=g, dtype=torch.float64) for _ in range(4))
    lhs = S.add_noise(a + 2 * b, e1 - e2, t, vp)
    rhs = S.add_noise(a, e1, t, vp) + 2 * S.add_noise(b, torch.zeros(5, dtype=torch.float64), t, vp) - S.add_noise(
        torch.zeros(5, dtype=torch.float64), e2, t, vp
    )
    assert torch.allclose(lhs, rhs, atol=1e-12)


def test_hand_conversion():
    s = S.NoiseSchedule("vp-linear", 1, np.array([0.8]), np.array([0.6]))
    v = S.convert_prediction(torch.tensor([1.0]), "epsilon", "v", torch.tensor([1.0]), 0, s)
    x0 = S.predict_x0(torch.tensor([1.0]), "epsilon", torch.tensor([1.0]), 0, s)
    assert float(x0) == pytest.approx(0.5)
    assert float(v) == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 999), st.sampled_from(["v", "sample"]), st.integers(0, 2**31 - 1))
def test_roundtrip(t, other, seed):
    vp = S.make_schedule("vp-linear", 1000)
    if vp.alphas[t] <= 1e-3:
        return
    g = torch.Generator().manual_seed(seed)
    eps, x_t = torch.randn(16, generator=g, dtype=torch.float64), torch.randn(16, generator=g, dtype=torch.float64)
    back = S.convert_prediction(S.convert_prediction(eps, "epsilon", other, x_t, t, vp), other, "epsilon", x_t, t, vp)
    assert torch.max(torch.abs(back - eps)) < 1e-6


def test_conversion_errors(vp):
    x = torch.ones(2)
    with pytest.raises(ValueError):
        S.convert_prediction(x, "epsilon", "epsilon", x, 3, vp)
    with pytest.raises(ValueError):
        S.convert_prediction(x, "score", "v", x, 3, vp)
    zero_a = S.NoiseSchedule("vp-linear", 1, np.array([0.0]), np.array([1.0]))
    with pytest.raises(ZeroDivisionError):
        S.predict_x0(x, "epsilon", x, 0, zero_a)


def test_precondition_examples():
    s = S.NoiseSchedule("euler-discrete", 3, np.ones(3), np.array([0.0, 1.0, math.sqrt(3)]))
    x = torch.tensor([2.0, -2.0], dtype=torch.float64)
    assert torch.equal(S.precondition_input(x, 0, s), x)
    assert S.input_scale(1, s) == pytest.approx(1 / math.sqrt(2))
    assert torch.allclose(S.precondition_input(x, 2, s, "discriminator"), torch.tensor([1.0, -1.0], dtype=torch.float64))
    with pytest.raises(ValueError):
        S.precondition_input(x, 0, s, "teacher")


def test_ddim_exact_noise_reconstruction(vp):
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = int(rng.integers(0, 1000))
        x0 = torch.from_numpy(rng.standard_normal(8))
        eps = torch.from_numpy(rng.standard_normal(8))
        x_t = S.add_noise(x0, eps, t, vp)
        rec = S.sampler_step(eps, x_t, t, S.CLEAN, vp, "ddim")
        assert torch.max(torch.abs(rec - x0)) < 1e-6


def test_euler_zero_step():
    s = S.NoiseSchedule("euler-discrete", 2, np.ones(2), np.array([2.0, 2.0]), "epsilon")
    x = torch.randn(4, dtype=torch.float64)
    out = S.sampler_step(torch.randn(4, dtype=torch.float64), x, 1, 0, s, "euler")
    assert torch.equal(out, x)


def test_lcm_linear_toy_one_step():
    # linear denoiser eps_hat = w * x_t; one LCM step from pure noise to clean
    s = S.make_schedule("lcm-uniform", 4)
    t = 3
    a, sig = s.coefficients(t)
    w = 0.7
    x_T = torch.randn(6, dtype=torch.float64)
    out = S.sampler_step(w * x_T, x_T, t, S.CLEAN, s, "lcm")
    assert torch.allclose(out, (x_T - sig * w * x_T) / a, atol=1e-12)
    # intermediate step with explicit noise
    z = torch.randn(6, dtype=torch.float64)
    mid = S.sampler_step(w * x_T, x_T, t, 1, s, "lcm", noise=z)
    a1, s1 = s.coefficients(1)
    assert torch.allclose(mid, a1 * (x_T - sig * w * x_T) / a + s1 * z, atol=1e-12)


def test_sampler_errors(vp):
    x = torch.zeros(3)
    with pytest.raises(ValueError):
        S.sampler_step(x, x, 5, 6, vp)
    with pytest.raises(ValueError):
        S.sampler_step(x, x, 5, 4, vp, "heun")
    with pytest.raises(ValueError):
        S.sampler_step(x, x, 5, 4, vp, "euler")
    with pytest.raises(ValueError):
        S.sampler_step(torch.zeros(2), x, 5, 4, vp)


@pytest.mark.parametrize("mean,target", [(-1.0, 1000 / (1 + math.e)), (0.0, 500.0)])
def test_logit_normal_median(mean, target):
    draws = S.sample_logit_normal_t(S.TimestepSamplerConfig(mean, 1.0), np.random.default_rng(0), 100_000)
    assert abs(np.median(draws) - target) <= 10
    assert draws.min() >= 0 and draws.max() <= 999


def test_logit_normal_degenerate_and_reproducible():
    cfg = S.TimestepSamplerConfig(0.0, 1e-6)
    assert np.all(S.sample_logit_normal_t(cfg, np.random.default_rng(1), 1000) == 500)
    a = S.sample_logit_normal_t(S.TimestepSamplerConfig(), np.random.default_rng(5), 64)
    b = S.sample_logit_normal_t(S.TimestepSamplerConfig(), np.random.default_rng(5), 64)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        S.TimestepSamplerConfig(0.0, 0.0)


def test_student_t_uniform():
    d = S.sample_student_t(8, np.random.default_rng(0), 80_000)
    counts = np.bincount(d, minlength=8)
    assert len(counts) == 8 and np.all(np.abs(counts / 10_000 - 1) < 0.05)


def test_json_roundtrip():
    s = S.make_schedule("euler-discrete", 8, "v")
    r = S.NoiseSchedule.from_json(s.to_json())
    assert r.kind == s.kind and r.prediction == "v"
    np.testing.assert_array_equal(r.sigmas, s.sigmas)
    np.testing.assert_array_equal(r.timesteps, s.timesteps)


def test_ddim_clip_x0():
    sched = S.make_schedule("vp-linear", 1000)
    x0 = torch.tensor([[10.0, -0.5]], dtype=torch.float64)
    eps = torch.tensor([[0.3, -1.0]], dtype=torch.float64)
    t, t_next = 700, 300
    x_t = S.add_noise(x0, eps, t, sched)
    out = S.sampler_step(eps, x_t, t, t_next, sched, "ddim", clip_x0=4.0)
    a, s = sched.coefficients(t)
    a2, s2 = sched.coefficients(t_next)
    x0c = torch.tensor([[4.0, -0.5]], dtype=torch.float64)
    assert torch.allclose(out, a2 * x0c + s2 * (x_t - a * x0c) / s, atol=1e-12)
    assert torch.allclose(S.sampler_step(eps, x_t, t, S.CLEAN, sched, "ddim", clip_x0=4.0), x0c, atol=1e-12)
    # a wide clamp is a no-op
    assert torch.allclose(S.sampler_step(eps, x_t, t, t_next, sched, "ddim", clip_x0=1e6), S.sampler_step(eps, x_t, t, t_next, sched, "ddim"))
