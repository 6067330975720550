"""Cokriging of covariates at unobserved locations and prediction grids."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .covariate_field import CovariateFieldParams, factored_precision_apply, joint_factors, marginal_factors
from .geo import GREAT_CIRCLE, LocationSet, matern_correlation

DEFAULT_BATCH = 20_000


@dataclass(frozen=True, eq=False)
class CokrigePrediction:
    values: np.ndarray
    target_locs: LocationSet

    def __post_init__(self):
        if self.values.shape[0] != len(self.target_locs):
            raise ValueError("prediction rows do not match target locations")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite cokriging prediction")


def _as_matrix(obs, k):
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.shape[1] != k:
        raise ValueError(f"expected {k} covariate columns, got {obs.shape[1]}")
    return obs


def cokrige_marginal(params: CovariateFieldParams, obs, locs_obs: LocationSet, locs_target: LocationSet,
                     *, batch_size: int = DEFAULT_BATCH) -> CokrigePrediction:
    """Per-covariate conditional means; equal to joint cokriging under the Kronecker model.

    Only ``M x M`` and ``M x N`` matrices are formed. Targets are processed in
    batches so large grids fit in memory.
    """
    obs = _as_matrix(obs, params.K)
    if obs.shape[0] != len(locs_obs):
        raise ValueError("observation rows do not match observed locations")
    factors = marginal_factors(params.marginals, locs_obs)
    weights = [f.solve(obs[:, k] - m.mu) for k, (m, f) in enumerate(zip(params.marginals, factors))]
    n = len(locs_target)
    out = np.empty((n, params.K))
    for start in range(0, n, batch_size):
        stop = min(n, start + batch_size)
        batch = locs_target if (start == 0 and stop == n) else LocationSet(
            locs_target.coords[start:stop], locs_target.metric, allow_duplicates=True)
        dist = batch.distances_to(locs_obs)
        for k, m in enumerate(params.marginals):
            # no nugget across sets, even where a target coincides with a station
            cross = m.sigma2 * matern_correlation(dist, m.nu, m.alpha)
            out[start:stop, k] = m.mu + cross @ weights[k]
    return CokrigePrediction(out, locs_target)


def cokrige_joint(params: CovariateFieldParams, obs, locs_obs: LocationSet,
                  locs_target: LocationSet) -> CokrigePrediction:
    """Joint conditional mean of all covariates at ``locs_target``.

    Cross-covariances come from the Cholesky factors of each covariate's
    covariance over the observed sites followed by the targets, combined
    through ``R``; the observed-block precision is applied in factored form.
    """
    obs = _as_matrix(obs, params.K)
    m, n, k = len(locs_obs), len(locs_target), params.K
    locs_all = locs_obs.concat(locs_target, allow_duplicates=True)
    full = joint_factors(params, locs_all)
    obs_factors = [type(f)(f.lower[:m, :m].copy()) for f in full]
    centred = obs - params.mu[None, :]
    u = factored_precision_apply(params, locs_obs, centred, factors=obs_factors)
    out = np.tile(params.mu, (n, 1))
    for a in range(k):
        la_target = full[a].lower[m:, :m]
        for b in range(k):
            if params.R[a, b] == 0.0:
                continue
            cross = params.R[a, b] * (la_target @ full[b].lower[:m, :m].T)
            out[:, a] += cross @ u[:, b]
    return CokrigePrediction(out, locs_target)


def prediction_grid(bbox, cell: float, metric: str = GREAT_CIRCLE) -> LocationSet:
    """Pixel centres covering ``bbox = (lon_min, lon_max, lat_min, lat_max)``.

    Longitude varies fastest. There are ``ceil(dlon / cell) * ceil(dlat / cell)``
    centres.
    """
    lon_min, lon_max, lat_min, lat_max = map(float, bbox)
    if not (lon_max > lon_min and lat_max > lat_min):
        raise ValueError("bounding box is degenerate")
    if not cell > 0:
        raise ValueError("cell size must be positive")
    # rounding guards against 35 / 0.1 = 350.00000000000006
    nx = math.ceil(round((lon_max - lon_min) / cell, 9))
    ny = math.ceil(round((lat_max - lat_min) / cell, 9))
    if nx * ny == 0:
        raise ValueError("empty grid")
    lon = lon_min + (np.arange(nx) + 0.5) * cell
    lat = lat_min + (np.arange(ny) + 0.5) * cell
    glon, glat = np.meshgrid(lon, lat)
    return LocationSet(np.column_stack([glon.ravel(), glat.ravel()]), metric)
