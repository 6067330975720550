"""Acceptance suite: one check per numbered criterion, each at its pinned tolerance.

The desk-scale comparative study (criteria 7, 8 and 11) runs 100 replicates
with 100 bootstrap draws per phase; on a single core it takes the better part
of an hour per run. Set ``CNR_FULL_SCALE=1`` to also run the full-size study.
"""

import math
import os
import warnings

import numpy as np
import pytest
from scipy import optimize, stats

from cnrkit import slmm
from cnrkit.bench import ScenarioConfig, run_scenario
from cnrkit.cokrige import cokrige_joint, cokrige_marginal
from cnrkit.covariate_field import (CovariateFieldParams, MarginalCovariateParams, ar1_correlation,
                                    assemble_joint_cov, factored_precision_apply, marginal_loglik, one_step_R,
                                    sample_covariates)
from cnrkit.gaussian import stream
from cnrkit.geo import MaternParams, matern_correlation
from cnrkit.slmm import natural_spline_basis

from conftest import planar_locs, random_field_params

DESK_SEED = 20261016
SLOPES = ("b1", "b2", "b3")

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def test_criterion_1_matern_spot_values(criterion):
    a = float(matern_correlation(438.34, 0.5, 0.0015))
    b = float(matern_correlation(1012.15, 0.5, 0.0015))
    criterion(1, abs(a - 0.518) <= 5e-4 and abs(b - 0.219) <= 5e-4, f"rho(438.34)={a:.5f} rho(1012.15)={b:.5f}")


def test_criterion_2_bessel_consistency(criterion):
    x = np.logspace(-4, math.log10(50), 400)
    worst = 0.0
    for nu in (0.5, 1.5, 2.5):
        general = matern_correlation(x, nu, 1.0, closed_form=False)
        closed = matern_correlation(x, nu, 1.0, closed_form=True)
        worst = max(worst, float(np.max(np.abs(general - closed) / np.abs(closed))))
    criterion(2, worst <= 1e-9, f"max relative difference {worst:.2e}")


def test_criterion_3_cokriging_equivalence(criterion):
    worst = 0.0
    for i in range(20):
        rng = stream(3, "acceptance-3", i)
        k, m, n = int(rng.integers(1, 6)), int(rng.integers(5, 61)), int(rng.integers(1, 31))
        params = random_field_params(rng, k)
        locs_obs, locs_t = planar_locs(rng, m), planar_locs(rng, n)
        obs = sample_covariates(params, locs_obs, rng)
        diff = cokrige_joint(params, obs, locs_obs, locs_t).values - cokrige_marginal(params, obs, locs_obs, locs_t).values
        worst = max(worst, float(np.max(np.abs(diff))))
    criterion(3, worst < 1e-8, f"max abs difference {worst:.2e} over 20 instances")


def test_criterion_4_factored_precision(criterion):
    worst = 0.0
    for i in range(10):
        rng = stream(4, "acceptance-4", i)
        params = random_field_params(rng, 4)
        locs = planar_locs(rng, 40)
        v = rng.normal(size=160)
        u = factored_precision_apply(params, locs, v)
        worst = max(worst, float(np.max(np.abs(assemble_joint_cov(params, locs) @ u - v))))
    criterion(4, worst < 1e-6, f"max residual {worst:.2e} over 10 instances")


def _numeric_R(x, marg, locs, start):
    n = len(locs)
    mean = np.concatenate([np.full(n, m.mu) for m in marg])
    flat = x.T.reshape(-1)

    def neg(p):
        L = np.array([[math.exp(p[0]), 0.0], [p[1], math.exp(p[2])]])
        cov = assemble_joint_cov(CovariateFieldParams(marg, L @ L.T), locs)
        return -stats.multivariate_normal(mean, cov).logpdf(flat)

    L0 = np.linalg.cholesky(start)
    p0 = [math.log(L0[0, 0]) + 0.3, L0[1, 0] - 0.3, math.log(L0[1, 1]) - 0.2]
    res = optimize.minimize(neg, p0, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000, "maxfev": 20000})
    L = np.array([[math.exp(res.x[0]), 0.0], [res.x[1], math.exp(res.x[2])]])
    return L @ L.T


def test_criterion_5_one_step_R(criterion):
    worst = 0.0
    for i in range(5):
        rng = stream(5, "acceptance-5", i)
        params = random_field_params(rng, 2)
        locs = planar_locs(rng, 10)
        x = sample_covariates(params, locs, rng)
        R_hat = one_step_R(x, params.marginals, locs)
        worst = max(worst, float(np.max(np.abs(R_hat - _numeric_R(x, params.marginals, locs, R_hat)))))
    criterion(5, worst < 1e-4, f"max entrywise difference {worst:.2e} over 5 instances")


def _score(m: MarginalCovariateParams, x, locs, rel=1e-5):
    """Central-difference gradient of the marginal log-likelihood in (mu, sigma2, alpha, tau)."""
    theta = np.array([m.mu, m.sigma2, m.alpha, m.tau])

    def ll(t):
        return marginal_loglik(MarginalCovariateParams(t[0], MaternParams(t[1], m.nu, t[2], t[3])), x, locs)

    g = np.empty(4)
    for j in range(4):
        h = rel * max(abs(theta[j]), 1.0) if j == 0 else rel * theta[j]
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        g[j] = (ll(up) - ll(dn)) / (2 * h)
    return g


def test_criterion_6_score_unbiasedness(criterion):
    cfg = ScenarioConfig.desk()
    locs = cfg.layout()[1]
    truth = cfg.theta_x_true
    assert not np.allclose(truth.R, np.eye(truth.K))
    scores = np.array([[_score(m, x[:, k], locs) for k, m in enumerate(truth.marginals)]
                       for x in (sample_covariates(truth, locs, stream(6, "acceptance-6", i)) for i in range(200))])
    mean = scores.mean(axis=0)
    se = scores.std(axis=0, ddof=1) / math.sqrt(scores.shape[0])
    z = np.abs(mean) / se
    criterion(6, bool(np.all(z < 3)), f"max |mean score| / MC s.e. = {z.max():.2f} over {z.size} components")


def _dd_at(basis_col, point, side, width=0.2):
    """Second derivative at ``point`` of the cubic piece on ``side`` (+1 right, -1 left), by exact interpolation."""
    xs = point + side * width * np.array([0.0, 1 / 3, 2 / 3, 1.0])
    coef = np.polyfit(xs - point, basis_col(xs), 3)
    return 2 * coef[1]


def test_criterion_9_spline_correctness(criterion):
    knots = np.array([-1.7, -0.6, 0.05, 0.4, 1.3, 2.2])
    worst = 0.0
    for j in range(len(knots) - 1):
        col = lambda t, j=j: natural_spline_basis(np.asarray(t, dtype=float), knots)[:, j]
        # at the boundary knots, approached from inside and from outside
        for point in (knots[0], knots[-1]):
            for side in (-1, 1):
                worst = max(worst, abs(_dd_at(col, point, side)))
        # beyond them
        for point in (-9.0, -3.0, 3.5, 12.0):
            h = 1e-2
            worst = max(worst, abs((col([point + h])[0] - 2 * col([point])[0] + col([point - h])[0]) / h ** 2))
    # a sanity check that the detector sees curvature inside
    inside = abs(_dd_at(lambda t: natural_spline_basis(np.asarray(t), knots)[:, 2], 0.1, 1, 0.1))

    rng = np.random.default_rng(9)
    locs = planar_locs(rng, 70)
    x = rng.normal(size=(70, 2))
    y = 1 + np.sin(x[:, 0]) + 0.5 * x[:, 1] + 0.3 * rng.normal(size=70)
    design = slmm.build_design(x, [slmm.BasisSpec.parse("ns4")] * 2)
    fit = slmm.fit(y, design, locs)
    dot_err = 0.0
    for i in range(70):
        for k in range(2):
            val = slmm.smoother_values(design, fit.beta, k, x[i:i + 1, k], x[i])
            dot_err = max(dot_err, abs(val[0] - design.B[i] @ fit.beta))
    ok = worst < 1e-6 and inside > 1e-2 and dot_err <= 1e-10
    criterion(9, ok, f"max |f''| at/beyond boundary {worst:.1e}; smoother vs design rows {dot_err:.1e}")


# --- desk-scale comparative study --------------------------------------------------


def _desk_table():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return run_scenario(ScenarioConfig.desk(master_seed=DESK_SEED, workers=0))


@pytest.fixture(scope="module")
def desk():
    return _desk_table()


@pytest.mark.slow
def test_criterion_7a_cnr_bias_below_5nmr(desk, criterion):
    cnr = [abs(desk.get("cnr", s, "bias")) for s in SLOPES]
    nmr = [abs(desk.get("nmr5", s, "bias")) for s in SLOPES]
    detail = "  ".join(f"{s}: {c:.4f} vs {n:.4f}" for s, c, n in zip(SLOPES, cnr, nmr))
    criterion("7a", all(c < n for c, n in zip(cnr, nmr)), detail)


@pytest.mark.slow
def test_criterion_7b_bootstrap_coverage(desk, criterion):
    cov = [desk.get("bootstrap", s, "coverage") for s in SLOPES]
    criterion("7b", all(0.88 <= c <= 0.99 for c in cov), "coverage " + ", ".join(f"{c:.2f}" for c in cov))


@pytest.mark.slow
def test_criterion_7c_ase_esd_ordering(desk, criterion):
    naive = [desk.get("naive", s, "ase_esd") for s in SLOPES]
    unadj = [desk.get("unadj", s, "ase_esd") for s in SLOPES]
    ok = all(n < 0.95 < u for n, u in zip(naive, unadj))
    detail = "  ".join(f"{s}: naive {n:.3f}, unadjusted {u:.3f}" for s, n, u in zip(SLOPES, naive, unadj))
    criterion("7c", ok, detail)


@pytest.mark.slow
def test_criterion_7d_ncc_undercovers(desk, criterion):
    ncc = [desk.get("ncc", s, "coverage") for s in SLOPES]
    boot = [desk.get("bootstrap", s, "coverage") for s in SLOPES]
    wins = sum(n < b for n, b in zip(ncc, boot))
    detail = "  ".join(f"{s}: ncc {n:.2f} vs proposed {b:.2f}" for s, n, b in zip(SLOPES, ncc, boot))
    criterion("7d", wins >= 2, detail)


@pytest.mark.slow
def test_criterion_8_bias_correction_efficacy(desk, criterion):
    rate = desk.bc_improvement_rate()
    criterion(8, rate >= 0.8, f"bias-corrected sigma2_rho closer to truth in {rate:.0%} of replicates")


@pytest.mark.slow
def test_criterion_11_determinism(desk, criterion):
    again = _desk_table()
    criterion(11, again.to_csv() == desk.to_csv(), f"{len(desk.to_csv())} bytes compared")


# --- full-size study -----------------------------------------------------------------

# reference values for the five slopes at full scale
REF_COVERAGE = {
    "naive": (0.8400, 0.8650, 0.8275, 0.8875, 0.8750),
    "naive_bc": (0.7150, 0.7375, 0.7175, 0.7625, 0.7625),
    "bootstrap": (0.9525, 0.9625, 0.9600, 0.9600, 0.9550),
    "unadj": (0.9725, 0.9725, 0.9675, 0.9725, 0.9825),
    "ncc": (0.9425, 0.9475, 0.8900, 0.8850, 0.9150),
    "nmr5": (0.7950, 0.8500, 0.8175, 0.8750, 0.8125),
}
REF_BIAS_NMR5 = (-0.1529, -0.0752, -0.1591, -0.0665, -0.1580)


@pytest.mark.slow
def test_criterion_10_full_scale(criterion):
    if os.environ.get("CNR_FULL_SCALE") != "1":
        criterion.skip(10, "full-size study not requested; set CNR_FULL_SCALE=1")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tab = run_scenario(ScenarioConfig.full(master_seed=DESK_SEED, workers=0))
    slopes = [f"b{j}" for j in range(1, 6)]
    problems = []
    for j, s in enumerate(slopes):
        nmr_bias = tab.get("nmr5", s, "bias")
        if np.sign(nmr_bias) != np.sign(REF_BIAS_NMR5[j]) or abs(tab.get("cnr", s, "bias")) >= abs(nmr_bias):
            problems.append(f"{s} bias")
        ratios = {m: tab.get(m, s, "ase_esd") for m in ("naive_bc", "naive", "bootstrap", "unadj")}
        if not ratios["naive_bc"] < ratios["naive"] < ratios["bootstrap"] < ratios["unadj"]:
            problems.append(f"{s} ASE/ESD ordering")
        for m, ref in REF_COVERAGE.items():
            if abs(tab.get(m, s, "coverage") - ref[j]) > 0.03:
                problems.append(f"{s} {m} coverage")
    criterion(10, not problems, "all checks matched" if not problems else "mismatched: " + ", ".join(problems))
