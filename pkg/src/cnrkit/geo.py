"""Locations, distances and the Matérn covariance family.

Coordinates are ``(coord1, coord2)`` pairs: planar ``(x, y)`` under the
Euclidean metric, ``(lon, lat)`` in degrees under the great-circle metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import special

EARTH_RADIUS_KM = 6371.0

EUCLIDEAN = "euclidean"
GREAT_CIRCLE = "great_circle"
METRICS = (EUCLIDEAN, GREAT_CIRCLE)

_METRIC_ALIASES = {
    "euclidean": EUCLIDEAN,
    "planar": EUCLIDEAN,
    "great_circle": GREAT_CIRCLE,
    "greatcircle": GREAT_CIRCLE,
    "great_circle_km": GREAT_CIRCLE,
    "greatcirclekm": GREAT_CIRCLE,
    "haversine": GREAT_CIRCLE,
}


def canonical_metric(metric: str) -> str:
    key = str(metric).strip().lower().replace("-", "_")
    try:
        return _METRIC_ALIASES[key]
    except KeyError:
        raise ValueError(f"unknown distance metric {metric!r}; expected one of {METRICS}") from None


def _check_coords(coords: np.ndarray, metric: str) -> None:
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must be finite")
    if metric == GREAT_CIRCLE:
        lon, lat = coords[:, 0], coords[:, 1]
        if np.any(np.abs(lat) > 90.0):
            raise ValueError("latitude outside [-90, 90]")
        if np.any(np.abs(lon) > 180.0):
            raise ValueError("longitude outside [-180, 180]")


def pairwise_distances(a, b, metric: str = EUCLIDEAN) -> np.ndarray:
    """Distance matrix between two coordinate arrays of shape (n, 2) and (m, 2).

    Great-circle distances use the haversine formula on a sphere of radius
    ``EARTH_RADIUS_KM`` and are returned in kilometres.
    """
    metric = canonical_metric(metric)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    _check_coords(a, metric)
    _check_coords(b, metric)
    if metric == EUCLIDEAN:
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    lon1, lat1 = np.radians(a[:, 0])[:, None], np.radians(a[:, 1])[:, None]
    lon2, lat2 = np.radians(b[:, 0])[None, :], np.radians(b[:, 1])[None, :]
    h = (np.sin(0.5 * (lat2 - lat1)) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin(0.5 * (lon2 - lon1)) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def distance(a, b, metric: str = EUCLIDEAN) -> float:
    """Distance between two single locations."""
    return float(pairwise_distances(np.reshape(a, (1, 2)), np.reshape(b, (1, 2)), metric)[0, 0])


@dataclass(eq=False)
class LocationSet:
    """Ordered collection of spatial locations sharing one metric."""

    coords: np.ndarray
    metric: str = EUCLIDEAN
    allow_duplicates: bool = False
    ids: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.metric = canonical_metric(self.metric)
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim == 1 and coords.size == 2:
            coords = coords.reshape(1, 2)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (n, 2), got {coords.shape}")
        if coords.shape[0] == 0:
            raise ValueError("a LocationSet must be nonempty")
        _check_coords(coords, self.metric)
        if not self.allow_duplicates:
            n_unique = np.unique(coords, axis=0).shape[0]
            if n_unique != coords.shape[0]:
                raise ValueError(
                    f"{coords.shape[0] - n_unique} duplicated location(s); "
                    "pass allow_duplicates=True to accept them"
                )
        coords.setflags(write=False)
        self.coords = coords
        if self.ids is not None:
            self.ids = tuple(self.ids)
            if len(self.ids) != coords.shape[0]:
                raise ValueError("ids length does not match number of locations")

    def __len__(self) -> int:
        return self.coords.shape[0]

    @cached_property
    def self_distances(self) -> np.ndarray:
        d = pairwise_distances(self.coords, self.coords, self.metric)
        np.fill_diagonal(d, 0.0)
        d.setflags(write=False)
        return d

    def distances_to(self, other: "LocationSet") -> np.ndarray:
        if other is self:
            return self.self_distances
        if other.metric != self.metric:
            raise ValueError("location sets use different metrics")
        return pairwise_distances(self.coords, other.coords, self.metric)

    def concat(self, other: "LocationSet", allow_duplicates: bool | None = None) -> "LocationSet":
        if other.metric != self.metric:
            raise ValueError("location sets use different metrics")
        if allow_duplicates is None:
            allow_duplicates = self.allow_duplicates or other.allow_duplicates
        return LocationSet(np.vstack([self.coords, other.coords]), self.metric, allow_duplicates)

    def median_distance(self) -> float:
        d = self.self_distances
        iu = np.triu_indices(len(self), k=1)
        if iu[0].size == 0:
            return 1.0
        return float(np.median(d[iu]))


@dataclass(frozen=True)
class MaternParams:
    """Matérn variance, smoothness, inverse range and nugget."""

    sigma2: float
    nu: float = 0.5
    alpha: float = 1.0
    tau: float = 0.0

    def __post_init__(self):
        for name in ("sigma2", "nu", "alpha"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if not (np.isfinite(self.tau) and self.tau >= 0):
            raise ValueError(f"tau must be nonnegative, got {self.tau}")


def modified_bessel_K(nu: float, x):
    """Modified Bessel function of the second kind, ``K_nu(x)``, for x > 0.

    Raises ``OverflowError`` when the value exceeds double range (x -> 0 with
    large order) and ``FloatingPointError`` when it underflows to zero.
    """
    if nu <= 0:
        raise ValueError("order must be positive")
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("argument must be positive")
    out = special.kv(nu, x)
    if np.any(~np.isfinite(out)):
        raise OverflowError(f"K_{nu}(x) overflows for x = {x[~np.isfinite(out)].min()}")
    if np.any(out == 0.0):
        raise FloatingPointError(f"K_{nu}(x) underflows for x = {x[out == 0.0].min()}")
    return out if out.ndim else float(out)


def _matern_general(x: np.ndarray, nu: float) -> np.ndarray:
    # 2^{1-nu} x^nu K_nu(x) / Gamma(nu), in log space; kve avoids underflow at large x
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    with np.errstate(under="ignore"):
        logv = ((1.0 - nu) * math.log(2.0) - special.gammaln(nu)
                + nu * np.log(xp) + np.log(special.kve(nu, xp)) - xp)
        out[pos] = np.minimum(np.exp(logv), 1.0)
    return out


def matern_correlation(d, nu: float, alpha: float, *, closed_form: bool = True):
    """Matérn correlation ``2^{1-nu} (alpha d)^nu K_nu(alpha d) / Gamma(nu)``.

    Equals 1 at d = 0. Half-integer orders 0.5, 1.5 and 2.5 use their
    exponential-polynomial closed forms unless ``closed_form`` is False.
    """
    if nu <= 0 or alpha <= 0:
        raise ValueError("nu and alpha must be positive")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    x = alpha * d
    if closed_form and nu == 0.5:
        out = np.exp(-x)
    elif closed_form and nu == 1.5:
        out = (1.0 + x) * np.exp(-x)
    elif closed_form and nu == 2.5:
        out = (1.0 + x + x * x / 3.0) * np.exp(-x)
    else:
        out = _matern_general(np.atleast_1d(x), nu).reshape(x.shape)
    return out if out.ndim else float(out)


def matern_from_distances(dist: np.ndarray, params: MaternParams, nugget: bool) -> np.ndarray:
    """Covariance matrix from a precomputed distance matrix.

    ``nugget`` adds ``tau`` on the diagonal; use it only when rows and
    columns index the same location set.
    """
    cov = params.sigma2 * matern_correlation(dist, params.nu, params.alpha)
    if nugget and params.tau > 0:
        cov[np.diag_indices_from(cov)] += params.tau
    return cov


def matern_cov_matrix(locs_a: LocationSet, locs_b: LocationSet | None, params: MaternParams) -> np.ndarray:
    """Matérn covariance between two location sets.

    The nugget enters only on the diagonal when ``locs_b`` is ``None`` or the
    same object as ``locs_a``. Coincident points of two different sets get
    ``sigma2`` without nugget.
    """
    same = locs_b is None or locs_b is locs_a
    metric = locs_a.metric
    if not same and locs_b.metric != metric:
        raise ValueError("location sets use different metrics")
    if metric == GREAT_CIRCLE and params.nu > 0.5:
        raise ValueError("great-circle distances require nu <= 0.5 for a valid covariance on the sphere")
    dist = locs_a.self_distances if same else locs_a.distances_to(locs_b)
    return matern_from_distances(dist, params, nugget=same)
