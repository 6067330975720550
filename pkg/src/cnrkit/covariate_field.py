"""Joint Gaussian model for K cross-correlated covariates.

Each covariate k has a Matérn marginal ``Sigma_k`` with lower Cholesky factor
``L_k``. Cross-covariances follow the generalized Kronecker form
``Bdiag(L_k) (R kron I) Bdiag(L_k)^T``, so block ``(k1, k2)`` equals
``R[k1, k2] * L_k1 @ L_k2.T`` and the marginals are preserved.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateInputError, FactorizationError
from .gaussian import (CholeskyFactor, OptimizerConfig, cholesky, maximize,
                       mvn_logpdf, profile_gls)
from .geo import LocationSet, MaternParams, matern_cov_matrix, matern_correlation

# search box on log scale: inverse range relative to 1/median distance, nugget/variance ratio
LOG_ALPHA_SPAN = 7.0
LOG_RATIO_BOUNDS = (-12.0, 8.0)


@dataclass(frozen=True)
class MarginalCovariateParams:
    mu: float
    matern: MaternParams

    @property
    def sigma2(self):
        return self.matern.sigma2

    @property
    def alpha(self):
        return self.matern.alpha

    @property
    def tau(self):
        return self.matern.tau

    @property
    def nu(self):
        return self.matern.nu


@dataclass(frozen=True, eq=False)
class CovariateFieldParams:
    """Marginal parameters of K covariates plus the K x K cross-correlation ``R``."""

    marginals: tuple
    R: np.ndarray

    def __post_init__(self):
        marginals = tuple(self.marginals)
        R = np.array(self.R, dtype=float, ndmin=2)
        k = len(marginals)
        if k < 1:
            raise ValueError("at least one covariate is required")
        if R.shape != (k, k):
            raise ValueError(f"R must be {k}x{k}, got {R.shape}")
        if np.max(np.abs(R - R.T)) > 1e-12 * max(1.0, np.max(np.abs(R))):
            raise ValueError("R must be symmetric")
        R = 0.5 * (R + R.T)
        if np.min(np.linalg.eigvalsh(R)) <= 0:
            raise ValueError("R must be positive definite")
        R.setflags(write=False)
        object.__setattr__(self, "marginals", marginals)
        object.__setattr__(self, "R", R)

    @property
    def K(self) -> int:
        return len(self.marginals)

    @property
    def mu(self) -> np.ndarray:
        return np.array([m.mu for m in self.marginals])

    def with_R(self, R) -> "CovariateFieldParams":
        return replace(self, R=R)

    def independent(self) -> "CovariateFieldParams":
        """Same marginals with ``R`` replaced by the identity."""
        return self.with_R(np.eye(self.K))


def ar1_correlation(k: int, rho: float) -> np.ndarray:
    idx = np.arange(k)
    return rho ** np.abs(idx[:, None] - idx[None, :])


# --- marginal fit ------------------------------------------------------------


def marginal_loglik(theta: MarginalCovariateParams, x, locs: LocationSet) -> float:
    """Gaussian log-likelihood of one covariate at ``locs`` (constant included)."""
    cov = matern_cov_matrix(locs, None, theta.matern)
    return mvn_logpdf(np.asarray(x, dtype=float), theta.mu, cholesky(cov))


def log_alpha_bounds(locs: LocationSet, span: float = LOG_ALPHA_SPAN):
    """Search interval for ``log(alpha)``, centred on ``-log(median distance)``."""
    centre = -math.log(locs.median_distance())
    return centre - span, centre + span


def on_search_edge(marginal: MarginalCovariateParams, locs: LocationSet, tol: float = 1e-3) -> bool:
    """True when a fitted marginal sits on the range bounds or the upper nugget-ratio bound."""
    lo, hi = log_alpha_bounds(locs)
    la = math.log(marginal.alpha)
    ratio = marginal.tau / marginal.sigma2
    return la < lo + tol or la > hi - tol or (ratio > 0 and math.log(ratio) > LOG_RATIO_BOUNDS[1] - tol)


def fit_marginal(x_tilde_k, locs: LocationSet, nu_fixed: float = 0.5, *,
                 init: MarginalCovariateParams | None = None,
                 cfg: OptimizerConfig | None = None) -> MarginalCovariateParams:
    """Maximum likelihood Matérn fit for one covariate with smoothness held fixed.

    The mean and the Matérn variance are concentrated out analytically (GLS
    mean, closed-form scale), leaving a two-dimensional search over
    ``log(alpha)`` and ``log(tau / sigma2)``. The maximizer coincides with the
    joint maximizer over ``(mu, sigma2, alpha, tau)``.
    """
    x = np.asarray(x_tilde_k, dtype=float)
    if x.ndim != 1 or x.shape[0] != len(locs):
        raise ValueError("covariate vector length must match the number of locations")
    if x.shape[0] < 10:
        raise DegenerateInputError(f"need at least 10 observations, got {x.shape[0]}")
    if np.ptp(x) == 0:
        raise DegenerateInputError("degenerate input: covariate is constant")
    dist = locs.self_distances
    ones = np.ones((x.shape[0], 1))
    a_lo, a_hi = log_alpha_bounds(locs)
    bounds = [(a_lo, a_hi), LOG_RATIO_BOUNDS]

    def objective(p):
        corr = matern_correlation(dist, nu_fixed, math.exp(p[0]))
        try:
            return profile_gls(corr, x, ones, math.exp(p[1])).loglik
        except FactorizationError:
            return -np.inf

    if init is None:
        start = [0.5 * (a_lo + a_hi), 0.0]
    else:
        start = [math.log(init.alpha), math.log(max(init.tau, 1e-300) / init.sigma2)]
    res = maximize(objective, start, cfg, bounds=bounds)
    alpha, ratio = math.exp(res.x[0]), math.exp(res.x[1])
    prof = profile_gls(matern_correlation(dist, nu_fixed, alpha), x, ones, ratio)
    sigma2 = prof.scale
    return MarginalCovariateParams(float(prof.beta[0]), MaternParams(sigma2, nu_fixed, alpha, ratio * sigma2))


def marginal_factors(marginals, locs: LocationSet) -> list[CholeskyFactor]:
    return [cholesky(matern_cov_matrix(locs, None, m.matern)) for m in marginals]


def one_step_R(x_tilde, marginals, locs: LocationSet, *, standardize: bool = False,
               factors: list[CholeskyFactor] | None = None) -> np.ndarray:
    """Closed-form maximizer of the joint likelihood over ``R`` given the marginals.

    Column k of ``Z`` is ``L_k^{-1} (x_k - mu_k)``; the estimate is ``Z^T Z / M``.
    It is not rescaled to unit diagonal unless ``standardize`` is set.
    """
    x = np.asarray(x_tilde, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    m, k = x.shape
    if len(marginals) != k:
        raise ValueError("one marginal per covariate column is required")
    factors = factors or marginal_factors(marginals, locs)
    z = np.column_stack([f.solve_lower(x[:, j] - marginals[j].mu) for j, f in enumerate(factors)])
    R = z.T @ z / m
    R = 0.5 * (R + R.T)
    d = np.diag(R)
    if np.any((d < 0.8) | (d > 1.2)):
        warnings.warn(f"one-step R has diagonal entries outside [0.8, 1.2]: {np.round(d, 3)}",
                      RuntimeWarning, stacklevel=2)
    if standardize:
        s = 1.0 / np.sqrt(d)
        R = R * s[:, None] * s[None, :]
    return R


def fit_covariate_field(x_tilde, locs: LocationSet, nu_fixed=0.5, *, init: CovariateFieldParams | None = None,
                        standardize_R: bool = False, cfg: OptimizerConfig | None = None) -> CovariateFieldParams:
    """Marginal fits for every covariate followed by the one-step ``R``."""
    x = np.asarray(x_tilde, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    k = x.shape[1]
    nus = np.broadcast_to(np.asarray(nu_fixed, dtype=float), (k,))
    marginals = tuple(
        fit_marginal(x[:, j], locs, float(nus[j]), init=None if init is None else init.marginals[j], cfg=cfg)
        for j in range(k)
    )
    R = one_step_R(x, marginals, locs, standardize=standardize_R)
    return CovariateFieldParams(marginals, R)


# --- joint covariance --------------------------------------------------------


def joint_factors(params: CovariateFieldParams, locs_all: LocationSet) -> list[CholeskyFactor]:
    return marginal_factors(params.marginals, locs_all)


def assemble_joint_cov(params: CovariateFieldParams, locs_all: LocationSet,
                       factors: list[CholeskyFactor] | None = None) -> np.ndarray:
    """Dense ``K n x K n`` covariance, blocks ordered covariate by covariate.

    Within a block rows follow ``locs_all`` (observed sites first when
    ``locs_all`` is the observed set concatenated with the response sites).
    """
    factors = factors or joint_factors(params, locs_all)
    n, k = len(locs_all), params.K
    out = np.empty((k * n, k * n))
    for a in range(k):
        for b in range(a, k):
            blk = params.R[a, b] * (factors[a].lower @ factors[b].lower.T)
            out[a * n:(a + 1) * n, b * n:(b + 1) * n] = blk
            out[b * n:(b + 1) * n, a * n:(a + 1) * n] = blk.T
    return out


def factored_precision_apply(params: CovariateFieldParams, locs: LocationSet, v,
                             factors: list[CholeskyFactor] | None = None) -> np.ndarray:
    """``Sigma^{-1} v`` through per-covariate triangular solves and ``R^{-1}``.

    ``v`` is either a stacked vector of length ``K * M`` or an ``M x K`` array;
    the result has the same shape.
    """
    v = np.asarray(v, dtype=float)
    k, m = params.K, len(locs)
    stacked = v.ndim == 1
    if stacked:
        if v.shape[0] != k * m:
            raise ValueError(f"expected vector of length {k * m}, got {v.shape[0]}")
        w = v.reshape(k, m).T
    else:
        if v.shape != (m, k):
            raise ValueError(f"expected array of shape {(m, k)}, got {v.shape}")
        w = v
    factors = factors or marginal_factors(params.marginals, locs)
    w = np.column_stack([f.solve_lower(w[:, j]) for j, f in enumerate(factors)])
    w = np.linalg.solve(params.R, w.T).T
    u = np.column_stack([f.solve_upper(w[:, j]) for j, f in enumerate(factors)])
    return u.T.reshape(-1) if stacked else u


def sample_covariates(params: CovariateFieldParams, locs_all: LocationSet, rng: np.random.Generator,
                      factors: list[CholeskyFactor] | None = None) -> np.ndarray:
    """One joint draw of all covariates at ``locs_all``, returned as ``n x K``."""
    factors = factors or joint_factors(params, locs_all)
    n = len(locs_all)
    z = rng.standard_normal((n, params.K)) @ np.linalg.cholesky(params.R).T
    cols = [m.mu + f.lower @ z[:, j] for j, (m, f) in enumerate(zip(params.marginals, factors))]
    return np.column_stack(cols)
