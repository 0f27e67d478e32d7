import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from splatsr import InvalidParameterError
from splatsr.diffusion import (
    AnnealState,
    PriorOracle,
    add_noise,
    build_schedule,
    lower_bound,
    prior_epsilon,
    sample_timestep,
    sds_pixel_grad,
)


def test_two_step_schedule():
    s = build_schedule(2, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.81])


def test_default_schedule_tail():
    s = build_schedule()
    # product of (1 - beta) over the linear 1e-4..0.02 ramp
    expect = math.prod(1 - (1e-4 + (0.02 - 1e-4) * k / 999) for k in range(1000))
    assert s.alpha_bar[-1] == pytest.approx(expect, rel=1e-10)
    assert s.alpha_bar[-1] == pytest.approx(4.04e-5, rel=0.01)
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_schedule_bounds():
    with pytest.raises(InvalidParameterError):
        build_schedule(1)
    with pytest.raises(InvalidParameterError):
        build_schedule(10, 0.02, 0.01)
    with pytest.raises(InvalidParameterError):
        build_schedule(10).abar(0)


def test_add_noise():
    s = build_schedule(2, 0.1, 0.1)
    x0 = np.full((2, 2, 3), 0.5)
    np.testing.assert_allclose(add_noise(x0, 2, np.ones_like(x0), s), 0.45 + math.sqrt(0.19), atol=1e-12)
    np.testing.assert_allclose(add_noise(x0, 2, np.zeros_like(x0), s), 0.9 * x0)
    with pytest.raises(InvalidParameterError):
        add_noise(x0, 1, np.zeros((2, 2, 2)), s)


def test_lower_bound_staircase():
    ann = AnnealState(T=100, N=100, t_min=5, delta=1)
    assert lower_bound(0, ann) == 100
    assert lower_bound(99, ann) == 100
    for k in range(0, 120, 7):
        assert lower_bound(k * 100, ann) == max(5, 100 - k)
    real = AnnealState(T=100, N=100, integer_steps=False)
    assert lower_bound(150, real) == 99


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 50000), st.integers(2, 200), st.integers(1, 500), st.integers(1, 5))
def test_lower_bound_properties(i, T, N, delta):
    ann = AnnealState(T=T, N=N, delta=delta)
    lb = lower_bound(i, ann)
    assert 1 <= lb <= T and lower_bound(i + 1, ann) <= lb
    t = sample_timestep(i, ann, np.random.default_rng(i))
    assert lb <= t <= T


def test_timestep_uniformity():
    ann = AnnealState(T=100, N=10)
    i = 300
    lb = lower_bound(i, ann)
    rng = np.random.default_rng(0)
    ts = np.array([sample_timestep(i, ann, rng) for _ in range(20000)])
    assert ts.min() == lb and ts.max() == 100
    counts = np.bincount(ts - lb, minlength=100 - lb + 1)
    assert stats.chisquare(counts).pvalue > 0.01
    assert sample_timestep(0, ann, rng) == 100
    vanilla = [sample_timestep(0, ann, rng, anneal=False) for _ in range(2000)]
    assert min(vanilla) == 1


def test_prior_oracles():
    rng = np.random.default_rng(0)
    s = build_schedule(100)
    ref = rng.random((8, 8, 3))
    eps = rng.normal(size=ref.shape)
    xt = add_noise(ref, 40, eps, s)
    perfect = PriorOracle("perfect", ref)
    np.testing.assert_allclose(prior_epsilon(perfect, xt, None, 40, s), eps, atol=1e-9)
    zero_noise = PriorOracle("noisy", ref, 0.0)
    np.testing.assert_array_equal(prior_epsilon(zero_noise, xt, None, 40, s, rng), prior_epsilon(perfect, xt, None, 40, s))
    with pytest.raises(InvalidParameterError):
        PriorOracle("perfect")
    with pytest.raises(InvalidParameterError):
        prior_epsilon(perfect, np.zeros((4, 4, 3)), None, 40, s)
    lr = rng.random((2, 2, 3))
    assert prior_epsilon(PriorOracle("bicubic"), xt, lr, 40, s).shape == (8, 8, 3)


def test_noisy_oracle_std():
    s = build_schedule(100)
    ref = np.full((2, 2, 3), 0.5)
    o = PriorOracle("noisy", ref, 0.5)
    rng = np.random.default_rng(1)
    draws = np.stack([prior_epsilon(o, ref, None, 50, s, rng) for _ in range(10000)])
    np.testing.assert_allclose(draws.std(axis=0), 0.5, rtol=0.02)


def test_sds_gradient_closed_form():
    s = build_schedule(100)
    rng = np.random.default_rng(2)
    ref = rng.random((6, 6, 3))
    x0 = rng.random((6, 6, 3))
    o = PriorOracle("perfect", ref)
    mags = []
    for t in range(1, 101):
        assert not sds_pixel_grad(ref, None, t, o, s, rng=rng).any()
        g = sds_pixel_grad(x0, None, t, o, s, "one_minus_abar", rng)
        ab = s.abar(t)
        np.testing.assert_allclose(g, (1 - ab) * math.sqrt(ab / (1 - ab)) * (x0 - ref), atol=1e-9)
        mags.append(np.abs(sds_pixel_grad(x0, None, t, o, s, rng=rng)).mean())
    assert np.all(np.diff(mags) < 0)


def test_noisy_sds_statistics():
    s = build_schedule(100)
    rng = np.random.default_rng(3)
    ref = np.full((2, 2, 3), 0.4)
    x0 = np.full((2, 2, 3), 0.6)
    o = PriorOracle("noisy", ref, 0.5)
    g = np.stack([sds_pixel_grad(x0, None, 30, o, s, rng=rng) for _ in range(10000)])
    closed = s.signal_to_noise(30) * 0.2
    np.testing.assert_allclose(g.mean(axis=0), closed, atol=4 * 0.5 / 100)
    np.testing.assert_allclose(g.std(axis=0), 0.5, rtol=0.03)


@pytest.mark.parametrize("mode", ["perfect", "noisy", "bicubic"])
def test_sds_matches_literal_noising(mode):
    # compose add_noise and prior_epsilon by hand, sharing the random draws
    s = build_schedule(100)
    rng = np.random.default_rng(4)
    x0 = rng.random((8, 8, 3))
    ref = rng.random((8, 8, 3))
    lr = rng.random((4, 4, 3))
    o = PriorOracle(mode, None if mode == "bicubic" else ref, 0.3 if mode == "noisy" else 0.0)
    for t in (1, 17, 60, 100):
        eps = rng.normal(size=x0.shape)
        seed = int(rng.integers(1 << 30))
        literal = prior_epsilon(o, add_noise(x0, t, eps, s), lr, t, s, np.random.default_rng(seed)) - eps
        fast = sds_pixel_grad(x0, lr, t, o, s, rng=np.random.default_rng(seed))
        np.testing.assert_allclose(fast, literal, atol=1e-9)
