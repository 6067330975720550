"""Dense multivariate normal algebra, seeded streams and a bounded maximizer."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import lapack

from .errors import FactorizationError, OptimizerError

LOG_2PI = math.log(2.0 * math.pi)

# jitter ladder, as multiples of trace/n
_JITTER_STEPS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower Cholesky factor ``L`` with ``L @ L.T`` equal to the source matrix.

    ``jitter`` records any diagonal inflation that was needed.
    """

    lower: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def solve_lower(self, b: np.ndarray) -> np.ndarray:
        """``L^{-1} b``."""
        return _trsolve(self.lower, b, 0)

    def solve_upper(self, b: np.ndarray) -> np.ndarray:
        """``L^{-T} b``."""
        return _trsolve(self.lower, b, 1)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """``(L L^T)^{-1} b``."""
        return self.solve_upper(self.solve_lower(b))

    def matrix(self) -> np.ndarray:
        return self.lower @ self.lower.T


def _trsolve(lower, b, trans):
    # direct LAPACK call; the scipy wrapper's validation dominates at n ~ 100
    x, info = lapack.dtrtrs(lower, b, lower=1, trans=trans)
    if info != 0:
        raise FactorizationError("singular triangular factor")
    return x


def cholesky(m, *, jitter: bool = True) -> CholeskyFactor:
    """Cholesky factorization with bounded diagonal jitter on failure.

    Jitter starts at ``1e-10 * trace / n`` and grows tenfold up to
    ``1e-6 * trace / n`` before giving up.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = np.max(np.abs(m)) if m.size else 0.0
    if scale > 0 and np.max(np.abs(m - m.T)) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    try:
        return CholeskyFactor(np.linalg.cholesky(m))
    except np.linalg.LinAlgError:
        if not jitter:
            raise FactorizationError("matrix is not positive definite") from None
    n = m.shape[0]
    base = float(np.trace(m)) / n
    if not base > 0:
        raise FactorizationError("matrix has nonpositive trace")
    for step in _JITTER_STEPS:
        eps = step * base
        try:
            return CholeskyFactor(np.linalg.cholesky(m + eps * np.eye(n)), jitter=eps)
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(f"matrix not positive definite after jitter {_JITTER_STEPS[-1]} * trace/n")


def mvn_logpdf(x, mean, chol: CholeskyFactor) -> float:
    x = np.asarray(x, dtype=float)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), x.shape)
    if x.ndim != 1 or x.shape[0] != chol.dim:
        raise ValueError(f"dimension mismatch: x has shape {x.shape}, covariance dim {chol.dim}")
    z = chol.solve_lower(x - mean)
    return -0.5 * (chol.dim * LOG_2PI + chol.logdet() + float(z @ z))


def mvn_sample(mean, chol: CholeskyFactor, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L z`` with ``z`` standard normal (rows are draws if ``size`` given)."""
    mean = np.asarray(mean, dtype=float)
    if size is None:
        z = rng.standard_normal(chol.dim)
        return mean + chol.lower @ z
    z = rng.standard_normal((size, chol.dim))
    return mean + z @ chol.lower.T


def stream(master_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent generator keyed by ``(master_seed, tag, index)``.

    Streams for different indices never overlap, so dropping or reordering
    replicates leaves every other replicate's draws unchanged.
    """
    seq = np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1),
                                 spawn_key=(zlib.crc32(tag.encode()), int(index)))
    return np.random.Generator(np.random.PCG64(seq))


# --- maximization -----------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 500
    rel_tol: float = 1e-8
    restarts: int = 2
    x_tol: float = 1e-4

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.restarts < 0:
            raise ValueError("restarts must be nonnegative")


@dataclass(frozen=True)
class MaximizeResult:
    x: np.ndarray
    value: float
    n_evals: int
    flat: bool = False


def maximize(objective, init, cfg: OptimizerConfig | None = None, bounds=None) -> MaximizeResult:
    """Derivative-free local maximization (Nelder-Mead with restarts).

    Each restart relaunches the simplex from the best point so far and stops
    early once it no longer improves the objective. Non-finite evaluations are
    treated as infeasible. The returned value is never below the value at
    ``init``.
    """
    cfg = cfg or OptimizerConfig()
    x0 = np.atleast_1d(np.asarray(init, dtype=float))
    if bounds is not None:
        bounds = [(lo, hi) for lo, hi in bounds]
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
    f0 = float(objective(x0))
    if not np.isfinite(f0):
        raise OptimizerError("objective is not finite at the initial point")

    seen_min, seen_max = f0, f0
    n_evals = 1

    def neg(x):
        nonlocal seen_min, seen_max, n_evals
        n_evals += 1
        v = float(objective(x))
        if not np.isfinite(v):
            return np.inf
        seen_min, seen_max = min(seen_min, v), max(seen_max, v)
        return -v

    best_x, best_f = x0, f0
    for attempt in range(cfg.restarts + 1):
        fatol = cfg.rel_tol * max(1.0, abs(best_f))
        res = optimize.minimize(
            neg, best_x, method="Nelder-Mead", bounds=bounds,
            options={"maxiter": cfg.max_iters, "maxfev": 2 * cfg.max_iters,
                     "xatol": cfg.x_tol, "fatol": fatol},
        )
        if attempt == 0 and seen_max == seen_min:
            return MaximizeResult(x0, f0, n_evals, flat=True)
        val = -float(res.fun)
        if not np.isfinite(val) or val <= best_f + fatol:
            if np.isfinite(val) and val > best_f:
                best_x, best_f = np.asarray(res.x, dtype=float), val
            break
        best_x, best_f = np.asarray(res.x, dtype=float), val
    return MaximizeResult(best_x, best_f, n_evals)


# --- concentrated Gaussian likelihood ---------------------------------------


@dataclass(frozen=True)
class ProfileResult:
    loglik: float
    beta: np.ndarray
    scale: float
    chol: CholeskyFactor


def profile_gls(corr: np.ndarray, y: np.ndarray, basis: np.ndarray, ratio: float) -> ProfileResult:
    """Gaussian log-likelihood maximized over mean coefficients and scale.

    The covariance is ``scale * (corr + ratio * I)``. For fixed ``corr`` and
    ``ratio`` the maximizing coefficients are the GLS solution and the
    maximizing scale is the mean squared whitened residual, so the returned
    value equals the full log-likelihood at those maximizers.
    """
    n = y.shape[0]
    a = corr.copy()
    a[np.diag_indices(n)] += ratio
    # symmetric by construction, so skip the checks in cholesky()
    low, info = lapack.dpotrf(a, lower=1, clean=1, overwrite_a=1)
    chol = CholeskyFactor(low) if info == 0 else cholesky(corr + ratio * np.eye(n))
    wy = chol.solve_lower(y)
    wb = chol.solve_lower(basis)
    gram = wb.T @ wb
    beta = np.linalg.solve(gram, wb.T @ wy)
    r = wy - wb @ beta
    scale = float(r @ r) / n
    if not scale > 0:
        scale = np.finfo(float).tiny
    loglik = -0.5 * (n * (LOG_2PI + math.log(scale) + 1.0) + chol.logdet())
    return ProfileResult(loglik, beta, scale, chol)
