"""Spatial linear mixed model: basis expansion, ML fit, GLS and smoothers.

The response model is ``y = B beta + rho + eps`` with ``rho`` a Matérn field
(``sigma2_rho``, ``nu_rho``, ``alpha_rho``) and ``eps`` white noise with
variance ``tau_eps``.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .covariate_field import LOG_RATIO_BOUNDS, log_alpha_bounds
from .errors import DegenerateInputError, FactorizationError, RankDeficientError
from .gaussian import OptimizerConfig, cholesky, maximize, mvn_logpdf, profile_gls
from .geo import LocationSet, MaternParams, matern_cov_matrix, matern_correlation

LINEAR = "linear"
POLYNOMIAL = "poly"
SPLINE = "ns"



class ExtrapolationWarning(UserWarning):
    """Smoother evaluated outside the range covered by the basis."""


@dataclass(frozen=True)
class BasisSpec:
    """Basis expansion ``f_k`` for one covariate.

    ``kind`` is ``"linear"``, ``"poly"`` (powers 1..degree) or ``"ns"``
    (natural cubic spline with ``n_knots`` interior knots).
    """

    kind: str = LINEAR
    degree: int = 1
    n_knots: int = 4

    def __post_init__(self):
        if self.kind not in (LINEAR, POLYNOMIAL, SPLINE):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")
        if self.n_knots < 1:
            raise ValueError("a natural spline needs at least one interior knot")

    @classmethod
    def parse(cls, text: str) -> "BasisSpec":
        """``"linear"``, ``"poly2"``, ``"ns4"`` style shorthand."""
        t = str(text).strip().lower()
        if t == LINEAR:
            return cls(LINEAR)
        m = re.fullmatch(r"(poly|ns)(\d+)", t)
        if not m:
            raise ValueError(f"cannot parse basis spec {text!r}")
        n = int(m.group(2))
        return cls(POLYNOMIAL, degree=n) if m.group(1) == POLYNOMIAL else cls(SPLINE, n_knots=n)

    @property
    def n_columns(self) -> int:
        if self.kind == LINEAR:
            return 1
        if self.kind == POLYNOMIAL:
            return self.degree
        return self.n_knots + 1

    def label(self) -> str:
        return {LINEAR: LINEAR, POLYNOMIAL: f"poly{self.degree}", SPLINE: f"ns{self.n_knots}"}[self.kind]


def quantile_knots(x, n_interior: int) -> np.ndarray:
    """Boundary knots at min/max and interior knots at equally spaced quantiles.

    Four interior knots are the 20/40/60/80th percentiles (quintiles).
    """
    x = np.asarray(x, dtype=float)
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    knots = np.concatenate([[x.min()], np.quantile(x, probs), [x.max()]])
    if np.any(np.diff(knots) <= 0):
        raise DegenerateInputError(f"duplicate spline knots after ties: {knots}")
    return knots


def natural_spline_basis(x, knots) -> np.ndarray:
    """Natural cubic spline basis without intercept, ``len(knots) - 1`` columns.

    Truncated-power construction: ``x`` followed by ``d_j - d_{K-1}`` with
    ``d_j = ((x - k_j)_+^3 - (x - k_K)_+^3) / (k_K - k_j)``. Every column is
    linear below the first and beyond the last knot.
    """
    x = np.asarray(x, dtype=float)
    knots = np.asarray(knots, dtype=float)
    kk = knots.shape[0]
    if kk < 3:
        raise ValueError("need at least three knots (two boundary plus one interior)")

    def d(j):
        return (np.maximum(x - knots[j], 0.0) ** 3 - np.maximum(x - knots[-1], 0.0) ** 3) / (knots[-1] - knots[j])

    last = d(kk - 2)
    cols = [x] + [d(j) - last for j in range(kk - 2)]
    return np.column_stack(cols)


def expand(x, spec: BasisSpec, knots=None) -> np.ndarray:
    """Columns of ``f_k(x)`` for one covariate."""
    x = np.asarray(x, dtype=float)
    if spec.kind == LINEAR:
        return x[:, None]
    if spec.kind == POLYNOMIAL:
        return np.column_stack([x ** p for p in range(1, spec.degree + 1)])
    if knots is None:
        raise ValueError("spline basis requires knots")
    return natural_spline_basis(x, knots)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Design ``B`` with intercept first, plus the metadata to rebuild rows."""

    B: np.ndarray
    specs: tuple
    column_map: tuple
    knots: tuple
    x: np.ndarray
    names: tuple = ()

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def K(self) -> int:
        return len(self.specs)

    def rows(self, x_new) -> np.ndarray:
        """Design rows for new covariate values (``n x K``) using the stored knots."""
        x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
        blocks = [np.ones((x_new.shape[0], 1))]
        for k, spec in enumerate(self.specs):
            blocks.append(expand(x_new[:, k], spec, self.knots[k]))
        return np.hstack(blocks)

    def column_names(self) -> list[str]:
        names = ["intercept"]
        for k, spec in enumerate(self.specs):
            base = self.names[k] if self.names else f"x{k + 1}"
            lo, hi = self.column_map[k]
            names += [base] if hi - lo == 1 else [f"{base}[{j + 1}]" for j in range(hi - lo)]
        return names


def _check_rank(B: np.ndarray, names) -> None:
    scale = np.linalg.norm(B, axis=0)
    if np.any(scale == 0):
        bad = [names[i] for i in np.flatnonzero(scale == 0)]
        raise RankDeficientError(f"all-zero design columns: {bad}", bad)
    _, r, piv = linalg.qr(B / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(B.shape) * np.finfo(float).eps * 1e4 * diag[0]
    rank = int(np.sum(diag > tol))
    if rank < B.shape[1]:
        bad = [names[i] for i in piv[rank:]]
        raise RankDeficientError(f"design matrix is rank deficient (rank {rank} < {B.shape[1]}); "
                                 f"dependent columns: {bad}", bad)


def build_design(x_hat, specs, knots_in=None, names=()) -> DesignMatrix:
    """Assemble ``[1, f_1(x_1), ..., f_K(x_K)]``.

    Spline knots are taken from ``knots_in`` when given, otherwise placed at
    quantiles of the supplied covariate values.
    """
    x = np.asarray(x_hat, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, k = x.shape
    specs = tuple(specs) if not isinstance(specs, BasisSpec) else (specs,) * k
    if len(specs) == 1 and k > 1:
        specs = specs * k
    if len(specs) != k:
        raise ValueError(f"{len(specs)} basis specs for {k} covariates")
    blocks, cmap, knots = [np.ones((n, 1))], [], []
    col = 1
    for j, spec in enumerate(specs):
        kn = None
        if spec.kind == SPLINE:
            kn = np.asarray(knots_in[j], dtype=float) if knots_in is not None and knots_in[j] is not None \
                else quantile_knots(x[:, j], spec.n_knots)
            if kn.shape[0] != spec.n_knots + 2:
                raise ValueError(f"covariate {j}: expected {spec.n_knots + 2} knots, got {kn.shape[0]}")
            if np.any(np.diff(kn) <= 0):
                raise DegenerateInputError(f"covariate {j}: knots must be strictly increasing")
        cols = expand(x[:, j], spec, kn)
        blocks.append(cols)
        cmap.append((col, col + cols.shape[1]))
        knots.append(kn)
        col += cols.shape[1]
    B = np.hstack(blocks)
    if n < B.shape[1] + 5:
        raise DegenerateInputError(f"need at least p + 5 = {B.shape[1] + 5} observations, got {n}")
    design = DesignMatrix(B, specs, tuple(cmap), tuple(knots), x, tuple(names))
    _check_rank(B, design.column_names())
    return design


# --- model fit ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SlmmParams:
    beta: np.ndarray
    sigma2_rho: float
    nu_rho: float
    alpha_rho: float
    tau_eps: float

    def __post_init__(self):
        for name in ("sigma2_rho", "nu_rho", "alpha_rho", "tau_eps"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))

    @property
    def spatial(self) -> np.ndarray:
        """``(sigma2_rho, alpha_rho, tau_eps)``."""
        return np.array([self.sigma2_rho, self.alpha_rho, self.tau_eps])

    def with_spatial(self, sigma2_rho, alpha_rho, tau_eps) -> "SlmmParams":
        return replace(self, sigma2_rho=float(sigma2_rho), alpha_rho=float(alpha_rho), tau_eps=float(tau_eps))

    def matern(self) -> MaternParams:
        return MaternParams(self.sigma2_rho, self.nu_rho, self.alpha_rho, 0.0)


@dataclass(frozen=True, eq=False)
class SlmmFit:
    params: SlmmParams
    naive_cov: np.ndarray
    loglik: float
    design: DesignMatrix
    locs: LocationSet = field(repr=False)
    y: np.ndarray = field(repr=False)
    covariate_means: np.ndarray | None = None

    @property
    def beta(self) -> np.ndarray:
        return self.params.beta

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.naive_cov))


def response_cov(locs: LocationSet, params: SlmmParams) -> np.ndarray:
    """``Sigma_rho + tau_eps I``."""
    v = matern_cov_matrix(locs, None, params.matern())
    v[np.diag_indices_from(v)] += params.tau_eps
    return v


def loglik(y, design: DesignMatrix, locs: LocationSet, params: SlmmParams) -> float:
    """Mixed-model log-likelihood at the given parameters (constant included)."""
    return mvn_logpdf(np.asarray(y, dtype=float), design.B @ params.beta, cholesky(response_cov(locs, params)))


def gls(y, B, V):
    """``(B^T V^{-1} B)^{-1} B^T V^{-1} y`` and ``(B^T V^{-1} B)^{-1}``."""
    c = cholesky(V)
    wb = c.solve_lower(B)
    wy = c.solve_lower(y)
    info = wb.T @ wb
    cov = linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    return cov @ (wb.T @ wy), cov


def fit(y, design: DesignMatrix, locs: LocationSet, nu_rho_fixed: float = 0.5, *,
        init: SlmmParams | None = None, cfg: OptimizerConfig | None = None) -> SlmmFit:
    """Maximum likelihood fit with ``beta`` and ``sigma2_rho`` concentrated out.

    The search runs over ``log(alpha_rho)`` and ``log(tau_eps / sigma2_rho)``;
    ``beta`` is the GLS solution and ``sigma2_rho`` the closed-form scale at
    each point, which gives the same maximizer as a search over all of
    ``(beta, sigma2_rho, alpha_rho, tau_eps)``.
    """
    y = np.asarray(y, dtype=float)
    B = design.B
    n = y.shape[0]
    if B.shape[0] != n or len(locs) != n:
        raise ValueError("response, design and locations disagree in length")
    dist = locs.self_distances
    a_lo, a_hi = log_alpha_bounds(locs)
    bounds = [(a_lo, a_hi), LOG_RATIO_BOUNDS]

    def objective(p):
        corr = matern_correlation(dist, nu_rho_fixed, math.exp(p[0]))
        try:
            return profile_gls(corr, y, B, math.exp(p[1])).loglik
        except FactorizationError:
            return -np.inf

    # default start: alpha = 1 / median distance, sigma2 = tau (ratio 1)
    start = [0.5 * (a_lo + a_hi), 0.0] if init is None else [math.log(init.alpha_rho), math.log(init.tau_eps / init.sigma2_rho)]
    res = maximize(objective, start, cfg, bounds=bounds)
    alpha, ratio = math.exp(res.x[0]), math.exp(res.x[1])
    prof = profile_gls(matern_correlation(dist, nu_rho_fixed, alpha), y, B, ratio)
    sigma2 = prof.scale
    params = SlmmParams(prof.beta, sigma2, nu_rho_fixed, alpha, ratio * sigma2)
    cov = _naive_cov(B, locs, params)
    return SlmmFit(params, cov, prof.loglik, design, locs, y)


def _naive_cov(B, locs, params: SlmmParams) -> np.ndarray:
    c = cholesky(response_cov(locs, params))
    wb = c.solve_lower(B)
    try:
        cov = linalg.inv(wb.T @ wb)
    except linalg.LinAlgError:
        raise RankDeficientError("singular information matrix") from None
    return 0.5 * (cov + cov.T)


def naive_variance(fit: SlmmFit, sigma2_rho=None, alpha_rho=None, tau_eps=None) -> np.ndarray:
    """``{B^T (Sigma_rho + tau_eps I)^{-1} B}^{-1}``, optionally at substituted spatial parameters."""
    p = fit.params
    params = p.with_spatial(p.sigma2_rho if sigma2_rho is None else sigma2_rho,
                            p.alpha_rho if alpha_rho is None else alpha_rho,
                            p.tau_eps if tau_eps is None else tau_eps)
    return _naive_cov(fit.design.B, fit.locs, params)


# --- smoothers -----------------------------------------------------------------


def _smoother_rows(design: DesignMatrix, k: int, x_grid, c) -> np.ndarray:
    x_grid = np.asarray(x_grid, dtype=float)
    pts = np.tile(np.asarray(c, dtype=float), (x_grid.shape[0], 1))
    pts[:, k] = x_grid
    kn = design.knots[k]
    lo, hi = (kn[0], kn[-1]) if kn is not None else (design.x[:, k].min(), design.x[:, k].max())
    if np.any(x_grid < lo) or np.any(x_grid > hi):
        warnings.warn(f"covariate {k}: smoother evaluated outside [{lo:.6g}, {hi:.6g}]",
                      ExtrapolationWarning, stacklevel=3)
    return design.rows(pts)


def default_conditioning(fit: SlmmFit) -> np.ndarray:
    if fit.covariate_means is not None:
        return np.asarray(fit.covariate_means, dtype=float)
    return fit.design.x.mean(axis=0)


def smoother_values(design: DesignMatrix, beta, k: int, x_grid, c) -> np.ndarray:
    return _smoother_rows(design, k, x_grid, c) @ np.asarray(beta, dtype=float)


def conditional_smoother(fit: SlmmFit, k: int, x_grid, c=None) -> np.ndarray:
    """``beta_0 + f_k(x)^T beta_k + sum_{l != k} f_l(c_l)^T beta_l`` over ``x_grid``.

    ``c`` defaults to the covariate means attached to the fit (the estimated
    ``mu`` from the covariate model in a CNR fit).
    """
    c = default_conditioning(fit) if c is None else c
    return smoother_values(fit.design, fit.beta, k, x_grid, c)


def smoother_band(fit: SlmmFit, k: int, x_grid, c=None, cov=None, z: float = 1.96):
    """Pointwise Wald band ``(fit, lower, upper)`` from a coefficient covariance."""
    c = default_conditioning(fit) if c is None else c
    rows = _smoother_rows(fit.design, k, x_grid, c)
    cov = fit.naive_cov if cov is None else cov
    val = rows @ fit.beta
    se = np.sqrt(np.einsum("ij,jk,ik->i", rows, cov, rows))
    return val, val - z * se, val + z * se
