import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfjm import _field_py, oracle
from pfjm.oracle import (
    R_MIN,
    ChargeSet,
    OracleError,
    field,
    integrate_field_line,
    ode_rhs,
    sample_prior,
    trace_field_lines,
)

try:
    from pfjm import _field_kernel
except ImportError:  # extension not built
    _field_kernel = None


def brute_force_field(charges, weights, x, r, D):
    """Direct summation with plain float arithmetic, no rescaling."""
    N = len(x)
    ex = [0.0] * N
    er = 0.0
    for y, w in zip(charges, weights):
        d2 = sum((xi - yi) ** 2 for xi, yi in zip(x, y)) + r * r
        inv = w / d2 ** ((N + D) / 2)
        for i in range(N):
            ex[i] += inv * (x[i] - y[i])
        er += inv * r
    return np.array(ex), er


def test_three_charges_match_brute_force():
    ys = [[0.3, -1.1], [1.7, 0.4], [-0.6, 0.9]]
    ws = [0.2, 0.5, 0.3]
    cs = ChargeSet(np.array(ys), np.array(ws))
    x, r, D = [0.25, 0.1], 0.8, 3
    fv = field(cs, x, r, D)
    ex, er = fv.unscaled()
    ref_ex, ref_er = brute_force_field(ys, ws, x, r, D)
    np.testing.assert_allclose(ex, ref_ex, rtol=1e-10)
    assert er == pytest.approx(ref_er, rel=1e-10)
    np.testing.assert_allclose(ode_rhs(cs, x, r, D), ref_ex / ref_er, rtol=1e-10)


def test_single_charge_is_radial():
    rng = np.random.default_rng(0)
    y0 = rng.standard_normal(5)
    cs = ChargeSet.uniform(y0[None])
    for _ in range(5):
        x = rng.standard_normal(5) * 3
        r = float(rng.uniform(0.01, 10))
        np.testing.assert_allclose(ode_rhs(cs, x, r, 7), (x - y0) / r, rtol=1e-13)
        fv = field(cs, x, r, 7)
        np.testing.assert_allclose(fv.e_x / fv.e_r, x / r - y0 / r, rtol=1e-13)


def test_symmetric_pair_cancels():
    cs = ChargeSet.uniform(np.array([[-1.5], [1.5]]))
    fv = field(cs, [0.0], 0.7, 4)
    assert fv.e_x[0] == 0.0
    assert fv.e_r > 0
    assert ode_rhs(cs, np.zeros(1), 0.7, 4)[0] == 0.0


def test_image_sized_dimension_stays_finite():
    rng = np.random.default_rng(1)
    N, D = 64 * 64 * 3, 128
    ys = rng.uniform(-1, 1, (4, N))
    cs = ChargeSet.uniform(ys)
    x = ys[0] + 0.01 * rng.standard_normal(N)
    fv = field(cs, x, 0.05, D)
    assert np.all(np.isfinite(fv.e_x)) and math.isfinite(fv.e_r) and fv.e_r > 0
    # nearest charge dominates completely at this scale
    np.testing.assert_allclose(ode_rhs(cs, x, 0.05, D), (x - ys[0]) / 0.05, rtol=1e-9)


def test_field_errors():
    cs = ChargeSet.uniform(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        field(cs, [0.0, 0.0], 0.0, 3)
    with pytest.raises(ValueError):
        field(cs, [0.0, 0.0], -1.0, 3)
    with pytest.raises(ValueError):
        field(cs, [0.0, 0.0, 0.0], 1.0, 3)
    with pytest.raises(ValueError):
        ChargeSet(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        ChargeSet(np.zeros((2, 2)), np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        ChargeSet(np.zeros((2, 2)), np.array([1.5, -0.5]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), log_k=st.floats(-30, 30), D=st.integers(1, 300))
def test_weight_scale_cancels(seed, log_k, D):
    rng = np.random.default_rng(seed)
    ys = rng.standard_normal((6, 3))
    w = rng.dirichlet(np.ones(6))
    X = rng.standard_normal((4, 3))
    r = rng.uniform(0.05, 3, 4)
    a = _field_py.field_batch(X, r, ys, np.log(w), D)
    b = _field_py.field_batch(X, r, ys, np.log(w) + log_k, D)
    np.testing.assert_allclose(a[0] / a[1][:, None], b[0] / b[1][:, None], rtol=1e-12, atol=1e-300)


@pytest.mark.skipif(_field_kernel is None, reason="compiled kernel not built")
def test_compiled_matches_fallback():
    rng = np.random.default_rng(2)
    for N, D, M in ((2, 3, 50), (17, 128, 30), (300, 2048, 8)):
        ys = rng.standard_normal((M, N))
        logw = np.log(rng.dirichlet(np.ones(M)))
        X = rng.standard_normal((9, N))
        r = rng.uniform(0.01, 5, 9)
        pe, pr, ps = _field_py.field_batch(X, r, ys, logw, D)
        ce, cr, cs_ = _field_kernel.field_batch(X, r, ys, logw, D)
        np.testing.assert_allclose(cs_, ps, rtol=1e-13)
        np.testing.assert_allclose(cr, pr, rtol=1e-11)
        np.testing.assert_allclose(ce, pe, rtol=1e-9, atol=1e-12 * np.abs(pe).max())


def test_kernel_selection_flag():
    assert oracle.KERNEL in ("cython", "python")


def test_single_charge_field_line_closed_form():
    y0 = np.array([0.5, -2.0, 1.0])
    cs = ChargeSet.uniform(y0[None])
    x0 = np.array([30.0, 12.0, -40.0])
    r_start = 50.0
    end = integrate_field_line(cs, x0, r_start, 0.0, 100, D=5)
    exact = y0 + (x0 - y0) * (R_MIN / r_start)
    np.testing.assert_allclose(end, exact, rtol=1e-6)


def test_rk4_convergence_order():
    y0 = np.zeros(2)
    cs = ChargeSet.uniform(y0[None])
    x0 = np.array([3.0, -4.0])
    exact = x0 * (R_MIN / 10.0)
    errs = [np.linalg.norm(integrate_field_line(cs, x0, 10.0, 0.0, n, D=3) - exact) for n in (8, 16, 32)]
    assert errs[0] / errs[1] >= 8
    assert errs[1] / errs[2] >= 8


def test_fixed_point_at_charge():
    y0 = np.array([1.25, -0.5])
    cs = ChargeSet.uniform(y0[None])
    radii, traj = trace_field_lines(cs, y0[None], 20.0, 0.0, 30, D=4, record=True)
    assert np.all(traj == y0)
    assert radii[0] == 20.0 and radii[-1] == pytest.approx(R_MIN)


def test_attraction_is_monotone():
    y0 = np.array([0.0, 1.0, -1.0])
    cs = ChargeSet.uniform(y0[None])
    _, traj = trace_field_lines(cs, np.array([[5.0, 5.0, 5.0]]), 40.0, 0.0, 60, D=8, record=True)
    dist = np.linalg.norm(traj[:, 0] - y0, axis=1)
    assert np.all(np.diff(dist) < 0)


def test_trajectory_slope_matches_rhs():
    rng = np.random.default_rng(3)
    cs = ChargeSet.uniform(rng.standard_normal((20, 2)))
    x, r, D = np.array([0.4, -0.3]), 1.5, 6
    rhs = ode_rhs(cs, x, r, D)
    errs = []
    for delta in (1e-2, 5e-3, 2.5e-3):
        x_end = integrate_field_line(cs, x, r, r - delta, 1, D)
        errs.append(np.linalg.norm((x_end - x) / (-delta) - rhs))
    assert 0.4 < errs[1] / errs[0] < 0.6
    assert 0.4 < errs[2] / errs[1] < 0.6


def test_non_finite_state_names_step():
    cs = ChargeSet.uniform(np.zeros((1, 2)))
    with pytest.raises(OracleError, match="step 0"):
        trace_field_lines(cs, np.array([[np.nan, 0.0]]), 10.0, 0.0, 5, D=3)


def test_integration_argument_checks():
    cs = ChargeSet.uniform(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        integrate_field_line(cs, [1.0], 1.0, 2.0, 10, 3)
    with pytest.raises(ValueError):
        integrate_field_line(cs, [1.0], 2.0, 1.0, 0, 3)


def test_batched_lines_match_single():
    rng = np.random.default_rng(4)
    cs = ChargeSet.uniform(rng.standard_normal((15, 2)))
    X0 = rng.standard_normal((3, 2)) * 20
    batch = trace_field_lines(cs, X0, 30.0, 0.0, 40, D=16)
    for i in range(3):
        np.testing.assert_array_equal(batch[i], integrate_field_line(cs, X0[i], 30.0, 0.0, 40, 16))


def test_prior_moments():
    r_max, N, D = 40.0, 3, 128
    x = sample_prior(np.random.default_rng(5), r_max, N, D, size=100_000)
    var = x.var(axis=0, ddof=1)
    n = len(x)
    se_var = var * math.sqrt(2 / (n - 1))
    assert np.all(np.abs(var - r_max ** 2 / D) < 3 * se_var)
    assert np.all(np.abs(x.mean(axis=0)) < 3 * np.sqrt(var / n))


def test_prior_variance_algebra():
    r_max, N = 2.0, 3
    rng = np.random.default_rng(6)
    unit = sample_prior(rng, r_max, N, int(r_max ** 2), size=50_000)
    assert unit.var() == pytest.approx(1.0, rel=0.02)
    # D = N * r_max**2 gives variance 1/N, not 1
    scaled = sample_prior(rng, r_max, N, N * int(r_max ** 2), size=50_000)
    assert scaled.var() == pytest.approx(1.0 / N, rel=0.02)
    assert sample_prior(np.random.default_rng(0), 1.0, 4, 4).shape == (4,)
