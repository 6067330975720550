import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cnrkit import slmm
from cnrkit.errors import DegenerateInputError, RankDeficientError
from cnrkit.gaussian import stream
from cnrkit.geo import LocationSet, MaternParams, matern_cov_matrix
from cnrkit.slmm import (BasisSpec, SlmmParams, build_design, conditional_smoother, expand, natural_spline_basis,
                         naive_variance, quantile_knots)

from conftest import planar_locs


def simulate(rng, n=80, k=2, sigma2=0.5, alpha=0.5, tau=0.2, beta=None):
    locs = planar_locs(rng, n)
    x = rng.normal(size=(n, k))
    beta = np.arange(1.0, k + 2) if beta is None else beta
    cov = matern_cov_matrix(locs, None, MaternParams(sigma2, 0.5, alpha, tau))
    y = np.column_stack([np.ones(n), x]) @ beta + np.linalg.cholesky(cov) @ rng.normal(size=n)
    return locs, x, y


def test_basis_spec_parsing():
    assert BasisSpec.parse("linear").n_columns == 1
    assert BasisSpec.parse("poly2") == BasisSpec("poly", degree=2)
    assert BasisSpec.parse("ns4").n_columns == 5
    with pytest.raises(ValueError):
        BasisSpec.parse("cubic")


def test_design_shapes(rng):
    x = rng.normal(size=(40, 2))
    d = build_design(x, [BasisSpec()] * 2)
    np.testing.assert_array_equal(d.B, np.column_stack([np.ones(40), x]))
    d2 = build_design(x, [BasisSpec.parse("poly2")] * 2)
    assert d2.p == 5
    np.testing.assert_allclose(d2.B[:, 2], x[:, 0] ** 2)
    d3 = build_design(x, [BasisSpec.parse("ns4")] * 2)
    assert d3.p == 11 and d3.column_map == ((1, 6), (6, 11))
    np.testing.assert_allclose(d3.knots[0], np.quantile(x[:, 0], [0, 0.2, 0.4, 0.6, 0.8, 1.0]))


def test_design_uses_supplied_knots(rng):
    x = rng.normal(size=(40, 1))
    kn = np.array([-3.0, -1, 0, 0.5, 1, 3])
    d = build_design(x, [BasisSpec.parse("ns4")], knots_in=[kn])
    np.testing.assert_array_equal(d.knots[0], kn)


def test_design_errors(rng):
    x = rng.normal(size=(40, 1))
    with pytest.raises(RankDeficientError) as exc:
        build_design(np.column_stack([x, 2 * x]), [BasisSpec()] * 2, names=("a", "b"))
    assert set(exc.value.columns) & {"a", "b"}
    with pytest.raises(DegenerateInputError):
        build_design(x[:5], [BasisSpec()])
    with pytest.raises(DegenerateInputError):
        quantile_knots(np.r_[np.zeros(30), np.arange(5.0)], 4)


def second_derivative(f, x, h=1e-3):
    return (f(x + h) - 2 * f(x) + f(x - h)) / h ** 2


def test_natural_spline_linear_beyond_boundary():
    knots = np.array([-2.0, -0.7, 0.1, 0.9, 2.5])
    # the stencil must stay on one side of the boundary knots
    pts = np.array([-6.0, -3.0, -2.01, 2.51, 4.0, 9.0])
    for j in range(len(knots) - 1):
        d2 = second_derivative(lambda t: natural_spline_basis(t, knots)[:, j], pts)
        assert np.max(np.abs(d2)) < 1e-6
    inside = second_derivative(lambda t: natural_spline_basis(t, knots)[:, 2], np.array([0.5]))
    assert abs(inside[0]) > 1e-3


def test_spline_reproduces_cubic_inside_and_linear_outside(rng):
    # least squares on a natural spline reproduces any straight line exactly
    x = np.sort(rng.uniform(-2, 2, 200))
    knots = quantile_knots(x, 4)
    B = np.column_stack([np.ones_like(x), natural_spline_basis(x, knots)])
    coef, *_ = np.linalg.lstsq(B, 1.5 - 0.3 * x, rcond=None)
    np.testing.assert_allclose(B @ coef, 1.5 - 0.3 * x, atol=1e-10)


def test_fit_gls_identity_and_optimality(rng):
    locs, x, y = simulate(rng)
    d = build_design(x, [BasisSpec()] * 2)
    f = slmm.fit(y, d, locs)
    V = slmm.response_cov(locs, f.params)
    Vi = np.linalg.inv(V)
    gls = np.linalg.solve(d.B.T @ Vi @ d.B, d.B.T @ Vi @ y)
    assert np.max(np.abs(f.beta - gls)) < 1e-8 * (1 + np.max(np.abs(f.beta)))
    assert f.loglik == pytest.approx(stats.multivariate_normal(d.B @ f.beta, V).logpdf(y), abs=1e-8)
    truth = SlmmParams(f.beta, 0.5, 0.5, 0.5, 0.2)
    assert f.loglik >= slmm.loglik(y, d, locs, truth)
    np.testing.assert_allclose(f.naive_cov, np.linalg.inv(d.B.T @ Vi @ d.B), rtol=1e-8)


def test_fit_without_spatial_signal_is_ols(rng):
    n = 60
    locs = planar_locs(rng, n)
    x = rng.normal(size=(n, 1))
    y = 1 + 2 * x[:, 0] + 0.3 * rng.normal(size=n)
    d = build_design(x, [BasisSpec()])
    f = slmm.fit(y, d, locs)
    ols, *_ = np.linalg.lstsq(d.B, y, rcond=None)
    # the fitted spatial variance collapses, so GLS and OLS coincide to optimizer precision
    assert f.params.sigma2_rho / f.params.tau_eps < 1e-3
    np.testing.assert_allclose(f.beta, ols, atol=1e-3)


def test_naive_variance_with_identity_covariance(rng):
    locs, x, y = simulate(rng, n=40)
    d = build_design(x, [BasisSpec()] * 2)
    f = slmm.fit(y, d, locs)
    cov = naive_variance(f, sigma2_rho=1e-300, tau_eps=1.0)
    np.testing.assert_allclose(cov, np.linalg.inv(d.B.T @ d.B), rtol=1e-10)


@settings(max_examples=10, deadline=None)
@given(st.floats(-50, 50))
def test_translation_equivariance(c):
    rng = np.random.default_rng(3)
    locs, x, y = simulate(rng, n=50)
    d = build_design(x, [BasisSpec()] * 2)
    f0, f1 = slmm.fit(y, d, locs), slmm.fit(y + c, d, locs)
    np.testing.assert_allclose(f1.beta[1:], f0.beta[1:], atol=1e-6)
    assert f1.beta[0] - f0.beta[0] == pytest.approx(c, abs=1e-6)


def test_oracle_bias_small_on_aligned_data():
    locs = LocationSet(stream(0, "l").uniform([88, 20], [128, 50], size=(300, 2)), "great_circle")
    beta = np.array([2.0, 1.0, 0.5])
    ests = []
    for t in range(30):
        rng = stream(1, "oracle", t)
        x = rng.normal(size=(300, 2))
        cov = matern_cov_matrix(locs, None, MaternParams(0.2, 0.5, 0.0015, 0.01))
        y = np.column_stack([np.ones(300), x]) @ beta + np.linalg.cholesky(cov) @ rng.normal(size=300)
        ests.append(slmm.fit(y, build_design(x, [BasisSpec()] * 2), locs).beta)
    assert np.max(np.abs(np.mean(ests, axis=0)[1:] - beta[1:])) < 0.02


def test_smoother_examples(rng):
    locs, x, y = simulate(rng)
    f = slmm.fit(y, build_design(x, [BasisSpec()] * 2), locs)
    grid = np.linspace(x[:, 0].min(), x[:, 0].max(), 7)
    vals = conditional_smoother(f, 0, grid, c=[0.0, 0.0])
    np.testing.assert_allclose(np.diff(vals) / np.diff(grid), f.beta[1])
    grid1 = np.linspace(x[:, 1].min(), x[:, 1].max(), 7)
    flat = slmm.smoother_values(f.design, np.array([3.0, 0.0, 0.0]), 1, grid1, [0.2, 0.4])
    np.testing.assert_allclose(flat, 3.0)


def test_spline_smoother_matches_design_rows(rng):
    locs, x, y = simulate(rng)
    d = build_design(x, [BasisSpec.parse("ns4")] * 2)
    f = slmm.fit(y, d, locs)
    c = x.mean(axis=0)
    for k in range(2):
        grid = d.knots[k]
        pts = np.tile(c, (len(grid), 1))
        pts[:, k] = grid
        direct = np.column_stack([np.ones(len(grid))] + [expand(pts[:, j], d.specs[j], d.knots[j]) for j in range(2)])
        np.testing.assert_allclose(conditional_smoother(f, k, grid, c), direct @ f.beta, atol=1e-10)
    # at design points the smoother with c = the row's other covariates is the fitted mean
    for i in range(5):
        val = conditional_smoother(f, 0, x[i:i + 1, 0], c=x[i])
        assert val[0] == pytest.approx(d.B[i] @ f.beta, abs=1e-10)


def test_smoother_extrapolation_flagged(rng):
    locs, x, y = simulate(rng)
    f = slmm.fit(y, build_design(x, [BasisSpec.parse("ns4")] * 2), locs)
    with pytest.warns(slmm.ExtrapolationWarning):
        conditional_smoother(f, 0, np.array([100.0]))


def test_smoother_band_contains_fit(rng):
    locs, x, y = simulate(rng)
    f = slmm.fit(y, build_design(x, [BasisSpec()] * 2), locs)
    val, lo, hi = slmm.smoother_band(f, 1, np.linspace(-1, 1, 5))
    assert np.all(lo <= val) and np.all(val <= hi)
