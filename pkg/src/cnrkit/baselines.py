"""Nearest-neighbour imputation baselines (L-NMR)."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import slmm
from .errors import DegenerateInputError
from .geo import LocationSet


@dataclass(frozen=True)
class NmrConfig:
    L: int = 5

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be a positive integer")


def nearest_indices(locs_obs: LocationSet, locs_target: LocationSet, L: int) -> np.ndarray:
    """Indices of the ``L`` nearest stations per target; ties go to the lower station index."""
    if len(locs_obs) == 0:
        raise DegenerateInputError("no observed stations")
    if L > len(locs_obs):
        raise ValueError(f"L = {L} exceeds the number of stations ({len(locs_obs)})")
    dist = locs_target.distances_to(locs_obs)
    return np.argsort(dist, axis=1, kind="stable")[:, :L]


def nmr_impute(obs, locs_obs: LocationSet, locs_target: LocationSet, cfg: NmrConfig | int = 5) -> np.ndarray:
    """Unweighted mean of each covariate over the ``L`` nearest stations."""
    L = cfg.L if isinstance(cfg, NmrConfig) else int(cfg)
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.shape[0] != len(locs_obs):
        raise ValueError("observation rows do not match observed locations")
    idx = nearest_indices(locs_obs, locs_target, L)
    return obs[idx].mean(axis=1)


def nmr_fit(y, obs, locs_obs: LocationSet, locs_target: LocationSet, cfg: NmrConfig | int, specs, *,
            nu_rho: float = 0.5, names=(), cfg_opt=None) -> slmm.SlmmFit:
    """Impute covariates by L-NMR, then fit the spatial mixed model."""
    x_imp = nmr_impute(obs, locs_obs, locs_target, cfg)
    design = slmm.build_design(x_imp, specs, names=names)
    fit = slmm.fit(y, design, locs_target, nu_rho, cfg=cfg_opt)
    return replace(fit, covariate_means=np.asarray(obs, dtype=float).reshape(len(locs_obs), -1).mean(axis=0))
