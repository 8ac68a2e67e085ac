import hashlib
import importlib

import numpy as np
import pytest

from speccoh.grid import GridSpec, MultiField
from speccoh.models import (
    InvalidModelError,
    LmcModel,
    MaternParams,
    MultiMaternModel,
    matern_cov,
)
from speccoh.simulate import (
    FilterStencil,
    SimRequest,
    SimulationError,
    filter2d,
    filtered_correlation,
    simulate,
)

sim_mod = importlib.import_module("speccoh.simulate")

EXP = MaternParams(1.0, 0.5, 1.0)
GRID16 = GridSpec((16, 16), (0.25, 0.25))


def univariate(p=EXP, d=2):
    return MultiMaternModel(d, (p,))


def lag_products(x, lag):
    """Per-replicate mean of x(s) x(s + lag) over sites, lag in cells along axis 0."""
    n = x.shape[1]
    return np.mean(x[:, : n - lag, :] * x[:, lag:, :], axis=(1, 2))


def within_3se(samples, target):
    se = samples.std(ddof=1) / np.sqrt(len(samples))
    return abs(samples.mean() - target) <= 3 * se


@pytest.fixture(scope="module")
def dense_exp():
    return simulate(SimRequest(univariate(), GRID16, 500, 0, "dense")).values[:, 0].real


@pytest.fixture(scope="module")
def circ_exp():
    return simulate(SimRequest(univariate(), GRID16, 500, 1, "circulant")).values[:, 0].real


@pytest.mark.parametrize("lag", [0, 1, 2, 4, 8])
def test_sample_covariance_matches_matern(dense_exp, lag):
    target = float(matern_cov([lag * 0.25, 0.0], EXP))
    assert within_3se(lag_products(dense_exp, lag), target)


def test_site_variances(dense_exp):
    R = dense_exp.shape[0]
    var = np.mean(dense_exp**2, axis=0)
    se = np.sqrt(2.0 / R)
    # every site within 3 standard errors of sigma^2 = 1
    assert np.all(np.abs(var - 1.0) <= 3 * se)


@pytest.mark.parametrize("lag", [0, 1])
def test_dense_and_circulant_agree(dense_exp, circ_exp, lag):
    a, b = lag_products(dense_exp, lag), lag_products(circ_exp, lag)
    se = np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
    assert abs(a.mean() - b.mean()) <= 3 * se


@pytest.mark.parametrize("lag", [0, 3])
def test_circulant_covariance(circ_exp, lag):
    assert within_3se(lag_products(circ_exp, lag), float(matern_cov([lag * 0.25, 0.0], EXP)))


def test_rho_zero_independent():
    m = MultiMaternModel.bivariate(2, 0.5, 1.5, 1.0, 1.0, 2.0, 1.5, 0.0)
    v = simulate(SimRequest(m, GRID16, 300, 5)).values.real
    prods = np.mean(v[:, 0] * v[:, 1], axis=(1, 2))
    assert within_3se(prods, 0.0)


def test_bivariate_cross_covariance():
    m = MultiMaternModel.bivariate(2, 1.0, 1.0, 1.0, 1.0, 1.0, 1.2, 0.5, 2.0, 0.5)
    v = simulate(SimRequest(m, GRID16, 400, 9)).values.real
    prods = np.mean(v[:, 0] * v[:, 1], axis=(1, 2))
    assert within_3se(prods, 0.5 * np.sqrt(2.0 * 0.5))


def test_lmc_lag0_covariance():
    B = np.array([[1.0, 0.0], [0.7, 0.5]])
    m = LmcModel(2, B, (MaternParams(1, 0.5, 1), MaternParams(1, 1.5, 2)))
    v = simulate(SimRequest(m, GRID16, 300, 4)).values.real
    C = B @ B.T
    for i, j in [(0, 0), (0, 1), (1, 1)]:
        assert within_3se(np.mean(v[:, i] * v[:, j], axis=(1, 2)), C[i, j])


def _digest(fld):
    return hashlib.sha256(fld.values.tobytes()).hexdigest()


@pytest.mark.parametrize("method", ["dense", "circulant"])
def test_deterministic(method):
    req = SimRequest(univariate(), GridSpec((8, 8)), 3, 42, method)
    assert _digest(simulate(req)) == _digest(simulate(req))
    other = SimRequest(univariate(), GridSpec((8, 8)), 3, 43, method)
    assert _digest(simulate(req)) != _digest(simulate(other))


def test_replicates_independent_of_batch_size():
    m = MultiMaternModel.bivariate(2, 1, 1, 1, 1, 1, 1, 0.3)
    few = simulate(SimRequest(m, GridSpec((8, 8)), 2, 7)).values
    many = simulate(SimRequest(m, GridSpec((8, 8)), 5, 7)).values
    np.testing.assert_array_equal(few, many[:2])


def test_seed_reduced_mod_2_64():
    a = simulate(SimRequest(univariate(), GridSpec((4, 4)), 1, 3))
    b = simulate(SimRequest(univariate(), GridSpec((4, 4)), 1, 3 + 2**64))
    assert a == b


def test_invalid_model_refused():
    bad = MultiMaternModel.bivariate(2, 0.5, 1.5, 0.9, 1, 1, 1, 0.5)
    with pytest.raises(InvalidModelError):
        simulate(SimRequest(bad, GridSpec((4, 4))))


def test_dense_budget():
    with pytest.raises(ValueError):
        SimRequest(univariate(), GridSpec((91, 91)), method="dense")


def test_grid_dimension_mismatch():
    with pytest.raises(ValueError):
        simulate(SimRequest(univariate(d=1), GridSpec((4, 4))))


def test_auto_falls_back_to_dense(monkeypatch):
    monkeypatch.setattr(sim_mod, "_embedded_sqrt", lambda *a: (None, -1.0))
    f = simulate(SimRequest(univariate(), GridSpec((6, 6)), 2, 0))
    ref = simulate(SimRequest(univariate(), GridSpec((6, 6)), 2, 0, "dense"))
    assert f == ref


def test_circulant_failure_beyond_budget(monkeypatch):
    monkeypatch.setattr(sim_mod, "_embedded_sqrt", lambda *a: (None, -1.0))
    with pytest.raises(SimulationError):
        simulate(SimRequest(univariate(), GridSpec((100, 100))))


def test_dense_jitter_retry():
    v = np.ones(4)
    singular = np.outer(v, v)  # rank one, Cholesky fails without jitter
    L = sim_mod._dense_factor(singular)
    assert np.allclose(L @ L.T, singular, atol=1e-8)
    with pytest.raises(SimulationError):
        sim_mod._dense_factor(np.diag([1.0, -1.0]))


# --- filters ----------------------------------------------------------------


def _field(arr):
    arr = np.asarray(arr, dtype=float)
    return MultiField(GridSpec(arr.shape[-2:]), arr.reshape((1, 1) + arr.shape[-2:]))


def test_stencils():
    lo, hi = FilterStencil.lowpass().weights, FilterStencil.highpass().weights
    assert np.all(lo == 1 / 9)
    assert hi[1, 1] == 8 / 9 and np.sum(hi == -1 / 9) == 8
    assert abs(hi.sum()) < 1e-15
    with pytest.raises(ValueError):
        FilterStencil(np.ones((2, 2)))


def test_filter_constant_field():
    f = _field(np.full((5, 6), 2.5))
    np.testing.assert_allclose(filter2d(f, FilterStencil.lowpass()).values, 2.5, rtol=1e-15)
    np.testing.assert_allclose(filter2d(f, FilterStencil.highpass()).values, 0, atol=1e-15)


def test_filter_delta_field():
    x = np.zeros((5, 5))
    x[2, 2] = 1.0
    lo = filter2d(_field(x), FilterStencil.lowpass()).values[0, 0].real
    hi = filter2d(_field(x), FilterStencil.highpass()).values[0, 0].real
    np.testing.assert_allclose(lo, np.full((3, 3), 1 / 9))
    np.testing.assert_allclose(hi, FilterStencil.highpass().weights)


def test_low_plus_high_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 3, 9, 7))
    f = MultiField(GridSpec((9, 7)), x)
    s = filter2d(f, FilterStencil.lowpass()).values + filter2d(f, FilterStencil.highpass()).values
    np.testing.assert_allclose(s, x[:, :, 1:-1, 1:-1], rtol=1e-13, atol=1e-15)


def test_filter_grid_too_small():
    with pytest.raises(ValueError):
        filter2d(_field(np.zeros((2, 5))), FilterStencil.lowpass())
    with pytest.raises(ValueError):
        filter2d(MultiField(GridSpec((5,)), np.zeros((1, 1, 5))), FilterStencil.lowpass())


def test_filtered_correlation_rho_zero():
    m = MultiMaternModel.bivariate(2, 0.5, 0.5, 1.0, 1, 1, 1, 0.0)
    g = GridSpec((32, 32), (0.25, 0.25))
    res = filtered_correlation(m, g, 40, 3)
    v = simulate(SimRequest(m, g, 40, 3))
    for stencil, value in ((FilterStencil.lowpass(), res.low), (FilterStencil.highpass(), res.high)):
        y = filter2d(v, stencil).values.real
        per_rep = [np.corrcoef(y[r, 0].ravel(), y[r, 1].ravel())[0, 1] for r in range(40)]
        se = np.std(per_rep, ddof=1) / np.sqrt(40)
        assert abs(value) <= 3 * se


def test_filtered_correlation_needs_bivariate():
    with pytest.raises(ValueError):
        filtered_correlation(univariate(), GridSpec((8, 8)), 1, 0)


def test_highpass_correlation_with_a12_read_as_range():
    # a12 = sqrt(2) taken as a range (inverse range 1/sqrt(2)) gives high-pass correlation near 0.25
    m = MultiMaternModel.bivariate(2, 1.0, 1.0, 1.0, 1.0, 1.0, 1 / np.sqrt(2), 0.5)
    res = filtered_correlation(m, GridSpec((64, 64), (0.125, 0.125)), 50, 0)
    assert abs(res.high - 0.25) <= 0.10
    assert res.low > 0.4


def test_filtered_correlation_examples():
    g = GridSpec((64, 64), (0.125, 0.125))
    smooth_cross = MultiMaternModel.bivariate(2, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 0.5)
    res = filtered_correlation(smooth_cross, g, 50, 0)
    assert abs(res.high) < 0.05 and res.low > 0.4
