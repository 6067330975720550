"""Two-phase parametric bootstrap for CNR fits.

Phase 1 simulates from the fitted model and refits each replicate to
estimate the bias of the spatial covariance parameters on the log scale.
Phase 2 simulates from the bias-corrected model and turns the refitted
coefficients into percentile intervals and pointwise smoother bands.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import slmm
from ._parallel import ordered_map
from .cnr import CnrFit, MisalignedDataset, cnr_fit
from .covariate_field import (CovariateFieldParams, joint_factors, log_alpha_bounds, on_search_edge,
                               sample_covariates)
from .errors import CnrError, ReplicateFailure
from .gaussian import CholeskyFactor, OptimizerConfig, cholesky, stream
from .geo import LocationSet, MaternParams, matern_cov_matrix

log = logging.getLogger(__name__)

PROPOSED = "proposed"
UNADJUSTED = "unadjusted"
NON_CROSS_CORRELATED = "ncc"
VARIANTS = (PROPOSED, UNADJUSTED, NON_CROSS_CORRELATED)
_VARIANT_ALIASES = {
    "proposed": PROPOSED, "bootstrap": PROPOSED,
    "unadjusted": UNADJUSTED, "unadj": UNADJUSTED,
    "ncc": NON_CROSS_CORRELATED, "noncrosscorrelated": NON_CROSS_CORRELATED,
    "non_cross_correlated": NON_CROSS_CORRELATED,
}

DROP_AND_WARN = "drop"
ABORT = "abort"

# stream tags; Unadjusted shares the phase-1 tag because its generator is the same law
TAG_PRELIM = "boot-prelim"
TAG_SECOND = "boot-second"

# replicate refits start at the original estimates, so a looser stopping rule suffices
REPLICATE_OPT = OptimizerConfig(rel_tol=1e-7, restarts=1, x_tol=1e-3)


def canonical_variant(name: str) -> str:
    key = str(name).strip().lower().replace("-", "_")
    key = {"non_cross_correlated": "ncc"}.get(key, key)
    if key not in _VARIANT_ALIASES:
        raise ValueError(f"unknown bootstrap variant {name!r}; choose from {VARIANTS}")
    return _VARIANT_ALIASES[key]


@dataclass(frozen=True)
class BootstrapConfig:
    T_prelim: int = 250
    T_second: int = 250
    variant: str = PROPOSED
    master_seed: int = 0
    failure_policy: str = DROP_AND_WARN
    level: float = 0.95
    band_points: int = 50
    range_guard: float = 1e3
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.failure_policy not in (DROP_AND_WARN, ABORT):
            raise ValueError(f"failure_policy must be {DROP_AND_WARN!r} or {ABORT!r}")
        for name in ("T_prelim", "T_second", "band_points"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0 < self.level <= 1:
            raise ValueError("level must lie in (0, 1]")
        if not self.range_guard > 1:
            raise ValueError("range_guard must exceed 1")
        if min(self.T_prelim, self.T_second) < 50:
            warnings.warn("fewer than 50 bootstrap replicates; intervals will be noisy",
                          RuntimeWarning, stacklevel=3)


@dataclass(frozen=True)
class BiasCorrectedSpatialParams:
    sigma2_rho_bc: float
    alpha_rho_bc: float
    tau_eps_bc: float

    def __post_init__(self):
        for v in self.as_array():
            if not (np.isfinite(v) and v > 0):
                raise ValueError("bias-corrected parameters must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma2_rho_bc, self.alpha_rho_bc, self.tau_eps_bc])


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Replicate draws and the summaries built from them.

    ``bands`` has shape ``K x G x 2`` (lower, upper) over ``band_grid``
    (``K x G``). Rows of the draw matrices follow replicate index; dropped
    replicates are absent and counted in ``n_dropped``.
    """

    variant: str
    beta_draws: np.ndarray
    spatial_draws: np.ndarray
    bc_params: BiasCorrectedSpatialParams | None
    intervals: np.ndarray
    band_grid: np.ndarray
    bands: np.ndarray
    smoother_draws: np.ndarray
    n_dropped: int
    replicate_ids: np.ndarray
    prelim_beta_draws: np.ndarray | None = None
    prelim_spatial_draws: np.ndarray | None = None
    n_dropped_prelim: int = 0
    beta_bc: np.ndarray | None = None
    level: float = 0.95

    @property
    def T(self) -> int:
        return self.beta_draws.shape[0]

    def standard_errors(self) -> np.ndarray:
        return self.beta_draws.std(axis=0, ddof=1)


# --- simulation ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Generator:
    """Fitted model frozen for repeated simulation over ``S_tilde`` then ``S``."""

    theta_x: CovariateFieldParams
    beta: np.ndarray
    specs: tuple
    knots: tuple
    locs_S: LocationSet
    locs_Stilde: LocationSet
    sigma2_rho: float
    nu_rho: float
    alpha_rho: float
    tau_eps: float
    x_factors: list = field(repr=False, default=None)
    rho_factor: CholeskyFactor | None = field(repr=False, default=None)

    @classmethod
    def build(cls, theta_x, beta, specs, knots, locs_S, locs_Stilde, spatial, nu_rho=0.5) -> "Generator":
        sigma2, alpha, tau = (float(v) for v in spatial)
        if sigma2 < 0 or tau < 0 or alpha <= 0:
            raise ValueError("spatial parameters out of range")
        locs_all = locs_Stilde.concat(locs_S, allow_duplicates=True)
        x_factors = joint_factors(theta_x, locs_all)
        rho = None
        if sigma2 > 0:
            rho = cholesky(matern_cov_matrix(locs_S, None, MaternParams(sigma2, nu_rho, alpha, 0.0)))
        return cls(theta_x, np.asarray(beta, dtype=float), tuple(specs), tuple(knots), locs_S, locs_Stilde,
                   sigma2, nu_rho, alpha, tau, x_factors, rho)

    def draw(self, rng: np.random.Generator):
        """One dataset: ``(y, x_tilde, x_S)`` with ``x_S`` the hidden covariates at ``S``."""
        m = len(self.locs_Stilde)
        locs_all = self.locs_Stilde.concat(self.locs_S, allow_duplicates=True)
        x = sample_covariates(self.theta_x, locs_all, rng, factors=self.x_factors)
        x_tilde, x_S = x[:m], x[m:]
        B = design_rows(self.specs, self.knots, x_S)
        n = x_S.shape[0]
        rho = self.rho_factor.lower @ rng.standard_normal(n) if self.rho_factor is not None else np.zeros(n)
        eps = math.sqrt(self.tau_eps) * rng.standard_normal(n)
        return B @ self.beta + rho + eps, x_tilde, x_S


def design_rows(specs, knots, x) -> np.ndarray:
    """``[1, f_1(x_1), ...]`` with fixed knots and no rank check."""
    x = np.asarray(x, dtype=float)
    blocks = [np.ones((x.shape[0], 1))]
    for k, spec in enumerate(specs):
        blocks.append(slmm.expand(x[:, k], spec, knots[k]))
    return np.hstack(blocks)


def simulate_dataset(theta_x: CovariateFieldParams, spatial, beta, specs, locs_S: LocationSet,
                     locs_Stilde: LocationSet, rng: np.random.Generator, *, nu_rho: float = 0.5, knots=None):
    """Draw covariates jointly over ``S_tilde`` and ``S``, then the response at ``S``.

    ``spatial`` is ``(sigma2_rho, alpha_rho, tau_eps)`` or an ``SlmmParams``;
    zero variances are allowed. The response design uses the true covariates
    at ``S``; spline knots default to their quantiles. Returns
    ``(y, x_tilde, x_S)``.
    """
    if isinstance(spatial, slmm.SlmmParams):
        nu_rho = spatial.nu_rho
        spatial = (spatial.sigma2_rho, spatial.alpha_rho, spatial.tau_eps)
    specs = tuple(specs)
    if knots is None:
        knots = (None,) * len(specs)
    gen = Generator.build(theta_x, beta, specs, knots, locs_S, locs_Stilde, spatial, nu_rho)
    if any(s.kind == slmm.SPLINE for s in specs) and any(k is None for k in knots):
        # knots depend on the hidden covariates, so draw them first
        m = len(locs_Stilde)
        x = sample_covariates(theta_x, locs_Stilde.concat(locs_S, allow_duplicates=True), rng,
                              factors=gen.x_factors)
        kn = tuple(slmm.quantile_knots(x[m:, k], s.n_knots) if s.kind == slmm.SPLINE else None
                   for k, s in enumerate(specs))
        B = design_rows(specs, kn, x[m:])
        n = len(locs_S)
        rho = gen.rho_factor.lower @ rng.standard_normal(n) if gen.rho_factor is not None else np.zeros(n)
        return B @ gen.beta + rho + math.sqrt(gen.tau_eps) * rng.standard_normal(n), x[:m], x[m:]
    return gen.draw(rng)


# --- summaries ----------------------------------------------------------------


def bias_correct(original, replicate_estimates) -> BiasCorrectedSpatialParams:
    """``exp(2 log(theta_hat) - mean_t log(theta_hat_t))`` for each spatial parameter.

    ``original`` is an ``SlmmParams`` or ``(sigma2_rho, alpha_rho, tau_eps)``;
    ``replicate_estimates`` is ``T x 3`` in the same order.
    """
    orig = original.spatial if isinstance(original, slmm.SlmmParams) else np.asarray(original, dtype=float)
    reps = np.atleast_2d(np.asarray(replicate_estimates, dtype=float))
    if reps.shape[0] == 0:
        raise ValueError("no replicate estimates")
    if reps.shape[1] != 3 or orig.shape != (3,):
        raise ValueError("expected three spatial parameters per estimate")
    if np.any(~np.isfinite(reps)) or np.any(reps <= 0) or np.any(orig <= 0):
        raise ValueError("spatial parameter estimates must be positive")
    bc = np.exp(2.0 * np.log(orig) - np.log(reps).mean(axis=0))
    return BiasCorrectedSpatialParams(*map(float, bc))


def percentile_interval(draws, level: float = 0.95):
    """Equal-tailed interval from linearly interpolated empirical quantiles."""
    d = np.asarray(draws, dtype=float)
    if d.ndim != 1 or d.shape[0] < 2:
        raise ValueError("need at least two draws")
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    a = 1.0 - level
    lo, hi = np.quantile(d, [a / 2, 1 - a / 2], method="linear")
    return float(lo), float(hi)


def band_grid(fit: CnrFit, points: int) -> np.ndarray:
    """Per-covariate evaluation grids spanning the fitted design's boundary range."""
    design = fit.slmm.design
    rows = []
    for k in range(design.K):
        kn = design.knots[k]
        lo, hi = (kn[0], kn[-1]) if kn is not None else (design.x[:, k].min(), design.x[:, k].max())
        rows.append(np.linspace(lo, hi, points))
    return np.array(rows)


def _smoother_draw(design: slmm.DesignMatrix, beta, grid, c) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", slmm.ExtrapolationWarning)
        return np.array([slmm.smoother_values(design, beta, k, grid[k], c) for k in range(design.K)])


# --- replicates ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Job:
    gen: Generator
    tag: str
    master_seed: int
    names: tuple
    nu_x: object
    theta_init: CovariateFieldParams
    slmm_init: slmm.SlmmParams
    grid: np.ndarray
    c: np.ndarray
    range_guard: float
    opt: OptimizerConfig | None


def _replicate(args):
    job, t = args
    rng = stream(job.master_seed, job.tag, t)
    y, x_tilde, _ = job.gen.draw(rng)
    data = MisalignedDataset(y, job.gen.locs_S, x_tilde, job.gen.locs_Stilde, job.names)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = cnr_fit(data, job.gen.specs, nu_x=job.nu_x, nu_rho=job.gen.nu_rho,
                          theta_init=job.theta_init, slmm_init=job.slmm_init, cfg=job.opt)
        _guard(fit, job)
    except (CnrError, np.linalg.LinAlgError) as exc:
        return t, None, f"{type(exc).__name__}: {exc}"
    smooth = _smoother_draw(fit.slmm.design, fit.beta, job.grid, job.c)
    return t, (fit.beta.copy(), fit.spatial.copy(), smooth), None


def _guard(fit: CnrFit, job: _Job) -> None:
    """Reject replicates whose range estimates are extreme or did not converge inside the search box."""
    for k, m in enumerate(fit.theta_x.marginals):
        if on_search_edge(m, job.gen.locs_Stilde):
            raise ReplicateFailure(f"covariate {k}: marginal fit stopped on the search boundary")
    lo, hi = log_alpha_bounds(job.gen.locs_S)
    la = math.log(fit.slmm.params.alpha_rho)
    if la < lo + 1e-3 or la > hi - 1e-3:
        raise ReplicateFailure("response range estimate stopped on the search boundary")
    g = job.range_guard
    pairs = [(fit.slmm.params.alpha_rho, job.slmm_init.alpha_rho)]
    pairs += [(a.alpha, b.alpha) for a, b in zip(fit.theta_x.marginals, job.theta_init.marginals)]
    for new, ref in pairs:
        if not (ref / g <= new <= ref * g):
            raise ReplicateFailure(f"fitted range {new:.3g} outside {g:g}-fold band around {ref:.3g}")


def _run_phase(job: _Job, T: int, policy: str, workers: int):
    out = ordered_map(_replicate, [(job, t) for t in range(T)], workers)
    kept, failed = [], []
    for t, res, err in out:
        if res is None:
            if policy == ABORT:
                raise ReplicateFailure(f"replicate {t} ({job.tag}) failed: {err}")
            failed.append((t, err))
        else:
            kept.append((t, res))
    if failed:
        warnings.warn(f"{len(failed)} of {T} bootstrap replicates dropped ({job.tag}); first: {failed[0][1]}",
                      RuntimeWarning, stacklevel=3)
    log.info("%s: %d replicates kept, %d dropped", job.tag, len(kept), len(failed))
    return kept, len(failed)


@dataclass(frozen=True, eq=False)
class _Phase:
    ids: np.ndarray
    beta: np.ndarray
    spatial: np.ndarray
    smooth: np.ndarray
    n_dropped: int

    @classmethod
    def collect(cls, kept, n_dropped, p, shape):
        if not kept:
            raise ReplicateFailure("every bootstrap replicate failed")
        return cls(np.array([t for t, _ in kept]),
                   np.array([r[0] for _, r in kept]).reshape(-1, p),
                   np.array([r[1] for _, r in kept]).reshape(-1, 3),
                   np.array([r[2] for _, r in kept]).reshape((-1,) + shape),
                   n_dropped)

    def head(self, T: int) -> "_Phase":
        """Replicates with index below ``T``; dropped ones among them are recounted."""
        sel = self.ids < T
        dropped = T - int(np.sum(sel))
        return _Phase(self.ids[sel], self.beta[sel], self.spatial[sel], self.smooth[sel], dropped)


def _summarize(variant, phase: _Phase, cfg: BootstrapConfig, grid, bc, prelim: _Phase | None,
               beta_hat) -> BootstrapResult:
    if phase.beta.shape[0] < 2:
        raise ReplicateFailure("fewer than two successful bootstrap replicates")
    intervals = np.array([percentile_interval(phase.beta[:, j], cfg.level) for j in range(phase.beta.shape[1])])
    a = 1.0 - cfg.level
    q = np.quantile(phase.smooth, [a / 2, 1 - a / 2], axis=0, method="linear")
    bands = np.stack([q[0], q[1]], axis=-1)
    beta_bc = None if prelim is None else 2.0 * beta_hat - prelim.beta.mean(axis=0)
    return BootstrapResult(
        variant=variant, beta_draws=phase.beta, spatial_draws=phase.spatial, bc_params=bc,
        intervals=intervals, band_grid=grid, bands=bands, smoother_draws=phase.smooth,
        n_dropped=phase.n_dropped, replicate_ids=phase.ids,
        prelim_beta_draws=None if prelim is None else prelim.beta,
        prelim_spatial_draws=None if prelim is None else prelim.spatial,
        n_dropped_prelim=0 if prelim is None else prelim.n_dropped,
        beta_bc=beta_bc, level=cfg.level,
    )


def run_variants(dataset: MisalignedDataset, fit: CnrFit, cfg: BootstrapConfig, variants=VARIANTS, *,
                 nu_x=0.5, opt: OptimizerConfig | None = None) -> dict:
    """Run several bootstrap variants on one fit, sharing phase 1 where possible.

    Phase 1 is computed once. Unadjusted reuses its first ``T_second``
    replicates whenever ``T_prelim >= T_second``; since both draw from the
    uncorrected model on the same streams the result is identical to a
    standalone run. NCC uses the phase-2 streams with ``R`` set to the
    identity, so it differs from Proposed only through the generator.
    """
    variants = [canonical_variant(v) for v in variants]
    design = fit.slmm.design
    specs, knots = design.specs, design.knots
    grid = band_grid(fit, cfg.band_points)
    c = slmm.default_conditioning(fit.slmm)
    params = fit.slmm.params
    shape = grid.shape

    def job(gen, tag):
        return _Job(gen, tag, cfg.master_seed, dataset.covariate_names, nu_x, fit.theta_x, params,
                    grid, c, cfg.range_guard, opt or REPLICATE_OPT)

    def phase(gen, tag, T):
        kept, dropped = _run_phase(job(gen, tag), T, cfg.failure_policy, cfg.workers)
        return _Phase.collect(kept, dropped, design.p, shape)

    def build(theta, spatial):
        return Generator.build(theta, fit.beta, specs, knots, dataset.locs_S, dataset.locs_Stilde,
                               spatial, params.nu_rho)

    uncorrected = build(fit.theta_x, params.spatial)
    need_prelim = PROPOSED in variants or NON_CROSS_CORRELATED in variants
    prelim = bc = None
    if need_prelim:
        prelim = phase(uncorrected, TAG_PRELIM, cfg.T_prelim)
        bc = bias_correct(params, prelim.spatial)

    results = {}
    for v in variants:
        if v == UNADJUSTED:
            if prelim is not None and cfg.T_prelim >= cfg.T_second:
                ph = prelim.head(cfg.T_second)
            else:
                ph = phase(uncorrected, TAG_PRELIM, cfg.T_second)
            results[v] = _summarize(v, ph, cfg, grid, None, None, fit.beta)
            continue
        theta = fit.theta_x if v == PROPOSED else fit.theta_x.independent()
        ph = phase(build(theta, bc.as_array()), TAG_SECOND, cfg.T_second)
        results[v] = _summarize(v, ph, cfg, grid, bc, prelim, fit.beta)
    return results


def run(dataset: MisalignedDataset, fit: CnrFit, cfg: BootstrapConfig, *, nu_x=0.5,
        opt: OptimizerConfig | None = None) -> BootstrapResult:
    """Bootstrap one CNR fit with the variant chosen in ``cfg``."""
    return run_variants(dataset, fit, cfg, (cfg.variant,), nu_x=nu_x, opt=opt)[cfg.variant]
