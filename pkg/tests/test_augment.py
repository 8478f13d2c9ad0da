import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from pfjm.augment import (
    AugmentationParams,
    _radius_from_beta,
    perturb,
    sample_noise,
    sample_radius,
    sample_sigma,
    sample_unit_direction,
    sigma_to_r,
)


@pytest.mark.parametrize("sigma,D,expected", [(1.0, 4, 2.0), (0.0, 128, 0.0), (2.5, 64, 20.0)])
def test_sigma_to_r(sigma, D, expected):
    assert sigma_to_r(sigma, D) == expected


@pytest.mark.parametrize("kw", [dict(N=0, D=1), dict(N=1, D=0), dict(N=1, D=1, sigma_data=0.0),
                                dict(N=1, D=1, p_std=-1.0)])
def test_params_reject_invalid(kw):
    with pytest.raises(ValueError):
        AugmentationParams(**kw)


def test_sigma_degenerate_prior():
    p = AugmentationParams(N=1, D=1, p_mean=-1.2, p_std=1e-300)
    s = sample_sigma(np.random.default_rng(0), p, size=10)
    np.testing.assert_allclose(s, math.exp(-1.2), rtol=1e-12)


def test_sigma_log_moments():
    p = AugmentationParams(N=1, D=1)
    s = sample_sigma(np.random.default_rng(1), p, size=100_000)
    assert abs(np.log(s).mean() + 1.2) < 0.02
    assert abs(np.median(s) / math.exp(-1.2) - 1) < 0.02


def test_radius_beta_midpoint():
    assert _radius_from_beta(0.5, 3.0) == pytest.approx(3.0, rel=1e-15)


def test_radius_clamp_keeps_finite():
    assert np.isfinite(_radius_from_beta(1.0, 1.0))
    assert _radius_from_beta(0.0, 1.0) > 0


def test_radius_rejects_nonpositive_r():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_radius(rng, 0.0, 2, 6)
    with pytest.raises(ValueError):
        sample_radius(rng, -1.0, 2, 6)


@pytest.mark.parametrize("N,D,r", [(2, 6, 1.0), (5, 3, 0.7), (1, 12, 2.0)])
def test_radius_second_moment(N, D, r):
    R = sample_radius(np.random.default_rng(N * 100 + D), r, N, D, size=1_000_000)
    assert np.all(R >= 0)
    r2 = R ** 2
    se = r2.std(ddof=1) / math.sqrt(r2.size)
    assert abs(r2.mean() - r * r * N / (D - 2)) < 3 * se


def test_radius_law_matches_density():
    # independent check: numerically normalized density vs samples (KS)
    N, D, r = 3, 5, 1.3
    R = sample_radius(np.random.default_rng(7), r, N, D, size=20_000)
    grid = np.linspace(0, 200, 400_001)
    logp = (N - 1) * np.log(np.maximum(grid, 1e-300)) - 0.5 * (N + D) * np.log(grid ** 2 + r ** 2)
    p = np.exp(logp - logp.max())
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    ks = stats.kstest(R, lambda q: np.interp(q, grid, cdf))
    assert ks.pvalue > 1e-3


def test_direction_unit_norm():
    rng = np.random.default_rng(0)
    for N in (1, 2, 7, 1000):
        assert abs(np.linalg.norm(sample_unit_direction(rng, N)) - 1) < 1e-6
    batch = sample_unit_direction(rng, 5, size=100)
    assert batch.shape == (100, 5)
    np.testing.assert_allclose(np.linalg.norm(batch, axis=1), 1.0, atol=1e-12)


def test_direction_sign_balance_n1():
    v = sample_unit_direction(np.random.default_rng(2), 1, size=100_000)
    assert set(np.unique(v)) <= {-1.0, 1.0}
    assert abs((v > 0).mean() - 0.5) < 0.005


def test_direction_mean_zero_n3():
    v = sample_unit_direction(np.random.default_rng(3), 3, size=100_000)
    se = v.std(axis=0, ddof=1) / math.sqrt(len(v))
    assert np.all(np.abs(v.mean(axis=0)) < 3 * se)


@pytest.mark.parametrize("N", [2, 4, 8])
def test_direction_isotropy(N):
    n = 100_000
    v = sample_unit_direction(np.random.default_rng(N), N, size=n)
    outer = v[:, :, None] * v[:, None, :]
    cov = outer.mean(axis=0)
    se = outer.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(cov - np.eye(N) / N) <= 5 * se + 1e-15)


def test_noise_draw_invariants():
    p = AugmentationParams(N=12, D=128)
    rng = np.random.default_rng(5)
    for _ in range(20):
        d = sample_noise(rng, p)
        assert d.r == d.sigma * math.sqrt(128)
        assert d.R >= 0
        assert abs(np.linalg.norm(d.v) - 1) < 1e-6


def test_noise_determinism():
    p = AugmentationParams(N=6, D=8)
    a = [sample_noise(np.random.default_rng(11), p) for _ in range(3)]
    b = [sample_noise(np.random.default_rng(11), p) for _ in range(3)]
    for x, y in zip(a, b):
        assert (x.sigma, x.r, x.R) == (y.sigma, y.r, y.R)
        assert x.v.tobytes() == y.v.tobytes()


def test_noise_zero_sigma():
    d = sample_noise(np.random.default_rng(0), AugmentationParams(N=3, D=4), sigma=0.0)
    assert d.r == 0 and d.R == 0


def test_perturb_examples():
    y = np.arange(12, dtype=np.float64).reshape(2, 2, 3)
    v = sample_unit_direction(np.random.default_rng(0), 12)
    assert np.array_equal(perturb(y, 0.0, v), y)
    e1 = np.zeros(12)
    e1[0] = 1
    out = perturb(np.zeros((2, 2, 3)), 1.0, e1)
    assert out[0, 0, 0] == 1 and out.sum() == 1
    x = perturb(y, 2.75, v)
    assert np.linalg.norm(x - y) == pytest.approx(2.75, rel=1e-5)


def test_perturb_batched_and_mismatch():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((4, 3, 3))
    R = np.array([0.0, 1.0, 2.0, 3.0])
    v = sample_unit_direction(rng, 9, size=4)
    x = perturb(y, R, v)
    np.testing.assert_allclose(np.linalg.norm((x - y).reshape(4, -1), axis=1), R, rtol=1e-12)
    with pytest.raises(ValueError):
        perturb(y[0], 1.0, v[0][:5])
    with pytest.raises(ValueError):
        perturb(y, R, v[:, :5])


@settings(max_examples=40, deadline=None)
@given(N=st.integers(1, 50), D=st.integers(1, 4096), r=st.floats(1e-3, 1e3), seed=st.integers(0, 2**32 - 1))
def test_radius_finite_nonnegative(N, D, r, seed):
    R = sample_radius(np.random.default_rng(seed), r, N, D, size=64)
    assert np.all(np.isfinite(R)) and np.all(R >= 0)


def ks_to_gaussian(D: int, sigma: float, n: int, seed: int) -> float:
    """KS distance between one perturbation coordinate and Normal(0, sigma**2)."""
    rng = np.random.default_rng(seed)
    N = 4
    R = sample_radius(rng, sigma * math.sqrt(D), N, D, size=n)
    v = sample_unit_direction(rng, N, size=n)
    return stats.kstest(R * v[:, 0], "norm", args=(0, sigma)).statistic


def test_diffusion_limit_trend_small():
    ks = [ks_to_gaussian(D, 0.8, 20_000, 0) for D in (2, 64, 4096)]
    assert ks[0] > ks[1] > ks[2] - 0.01
