"""Cokrig-and-regress: fit the covariate field, cokrige, then fit the mixed model."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import slmm
from .cokrige import cokrige_marginal
from .covariate_field import CovariateFieldParams, fit_covariate_field
from .gaussian import OptimizerConfig
from .geo import LocationSet


@dataclass(frozen=True, eq=False)
class MisalignedDataset:
    """Responses at ``locs_S`` and covariates observed only at ``locs_Stilde``."""

    y: np.ndarray
    locs_S: LocationSet
    x_tilde: np.ndarray
    locs_Stilde: LocationSet
    covariate_names: tuple = ()
    response_name: str = "y"

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x_tilde, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim != 1 or y.shape[0] != len(self.locs_S):
            raise ValueError("response length must match response locations")
        if x.shape[0] != len(self.locs_Stilde):
            raise ValueError("covariate rows must match covariate locations")
        if self.locs_S.metric != self.locs_Stilde.metric:
            raise ValueError("response and covariate locations use different metrics")
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValueError("one name per covariate column is required")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x_tilde", x)
        object.__setattr__(self, "covariate_names", names)

    @property
    def N(self) -> int:
        return len(self.locs_S)

    @property
    def M(self) -> int:
        return len(self.locs_Stilde)

    @property
    def K(self) -> int:
        return self.x_tilde.shape[1]


@dataclass(frozen=True, eq=False)
class CnrFit:
    theta_x: CovariateFieldParams
    x_hat: np.ndarray
    slmm: slmm.SlmmFit

    @property
    def beta(self) -> np.ndarray:
        return self.slmm.beta

    @property
    def spatial(self) -> np.ndarray:
        return self.slmm.params.spatial


def cnr_fit(data: MisalignedDataset, specs, *, nu_x=0.5, nu_rho: float = 0.5, knots=None,
            theta_init: CovariateFieldParams | None = None, slmm_init: slmm.SlmmParams | None = None,
            standardize_R: bool = False, cfg: OptimizerConfig | None = None) -> CnrFit:
    """Three-step CNR estimate.

    ``knots`` fixes spline knots; by default they are re-derived from the
    cokriged covariates. ``theta_init``/``slmm_init`` only seed the optimizers.
    """
    theta = fit_covariate_field(data.x_tilde, data.locs_Stilde, nu_x, init=theta_init,
                                standardize_R=standardize_R, cfg=cfg)
    x_hat = cokrige_marginal(theta, data.x_tilde, data.locs_Stilde, data.locs_S).values
    design = slmm.build_design(x_hat, specs, knots, names=data.covariate_names)
    fit = slmm.fit(data.y, design, data.locs_S, nu_rho, init=slmm_init, cfg=cfg)
    fit = replace(fit, covariate_means=theta.mu)
    return CnrFit(theta, x_hat, fit)
