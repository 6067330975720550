"""Monte Carlo comparison of CNR, its variance estimators and nearest-station baselines."""

from __future__ import annotations

import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import bootstrap, slmm
from ._parallel import ordered_map
from .baselines import nmr_fit
from .cnr import MisalignedDataset, cnr_fit
from .covariate_field import CovariateFieldParams, MarginalCovariateParams, ar1_correlation
from .errors import CnrError
from .gaussian import stream
from .geo import GREAT_CIRCLE, LocationSet, MaternParams

log = logging.getLogger(__name__)

Z95 = 1.96

# point-estimate rows, then variance/interval rows built on the CNR estimate
METHODS = ("cnr", "bc_cnr", "nmr1", "nmr3", "nmr5", "oracle",
           "naive", "naive_bc", "bootstrap", "unadj", "ncc")
DEFAULT_METHODS = METHODS
_POINT_ONLY = ("cnr", "bc_cnr")
_BOOT = {"bootstrap": bootstrap.PROPOSED, "unadj": bootstrap.UNADJUSTED, "ncc": bootstrap.NON_CROSS_CORRELATED}

# station layouts: the desk box gives pairwise-distance quartiles near 480 and 1030 km
DESK_BBOX = (108.0, 124.0, 28.0, 41.0)
FULL_BBOX = (88.0, 128.0, 20.0, 50.0)


def _nmr_L(method: str) -> int | None:
    return int(method[3:]) if method.startswith("nmr") else None


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    M: int
    N: int
    K: int
    theta_x_true: CovariateFieldParams
    slmm_true: slmm.SlmmParams
    n_reps: int
    T: int
    methods: tuple = DEFAULT_METHODS
    master_seed: int = 0
    bbox: tuple = DESK_BBOX
    specs: tuple = ()
    metric: str = GREAT_CIRCLE
    nu_x: float = 0.5
    workers: int = 1

    def __post_init__(self):
        specs = tuple(self.specs) or (slmm.BasisSpec(),) * self.K
        object.__setattr__(self, "specs", specs)
        methods = tuple(m.lower() for m in self.methods)
        bad = [m for m in methods if m not in METHODS and _nmr_L(m) is None]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        object.__setattr__(self, "methods", methods)
        if min(self.M, self.N, self.K, self.n_reps, self.T) < 1:
            raise ValueError("M, N, K, n_reps and T must be positive")
        if self.theta_x_true.K != self.K or len(specs) != self.K:
            raise ValueError("covariate model and basis specs must have K entries")
        p = 1 + sum(s.n_columns for s in specs)
        if self.beta_true.shape != (p,):
            raise ValueError(f"beta has {self.beta_true.shape[0]} entries, design has {p} columns")

    @property
    def beta_true(self) -> np.ndarray:
        return self.slmm_true.beta

    @classmethod
    def default(cls, K: int, R, beta, *, M: int, N: int, n_reps: int, T: int, bbox, **kw) -> "ScenarioConfig":
        marg = tuple(MarginalCovariateParams(0.0, MaternParams(1.0, 0.5, 0.0015, 0.15)) for _ in range(K))
        theta = CovariateFieldParams(marg, R)
        truth = slmm.SlmmParams(np.asarray(beta, dtype=float), 0.2, 0.5, 0.0015, 0.01)
        return cls(M, N, K, theta, truth, n_reps, T, bbox=bbox, **kw)

    @classmethod
    def full(cls, **kw) -> "ScenarioConfig":
        """Five covariates, the last three AR(1)-correlated, 243 stations and 796 response sites."""
        R = np.eye(5)
        R[2:, 2:] = ar1_correlation(3, 0.5)
        args = dict(M=243, N=796, n_reps=400, T=250, bbox=FULL_BBOX)
        args.update(kw)
        return cls.default(5, R, [2, 1, 0.5, 1, 0.5, 1], **args)

    @classmethod
    def desk(cls, **kw) -> "ScenarioConfig":
        """Three AR(1)-correlated covariates on 60 stations and 120 response sites."""
        args = dict(M=60, N=120, n_reps=100, T=100, bbox=DESK_BBOX)
        args.update(kw)
        return cls.default(3, ar1_correlation(3, 0.5), [2, 1, 0.5, 1], **args)

    def layout(self):
        """Fixed station layout ``(S, S_tilde)`` drawn uniformly over ``bbox``."""
        rng = stream(self.master_seed, "layout")
        lon0, lon1, lat0, lat1 = self.bbox
        pts = np.column_stack([rng.uniform(lon0, lon1, self.M + self.N), rng.uniform(lat0, lat1, self.M + self.N)])
        return LocationSet(pts[self.M:], self.metric), LocationSet(pts[:self.M], self.metric)


# --- metrics --------------------------------------------------------------------


def _vec(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty input")
    return x


def metric_bias(estimates, truth: float) -> float:
    return float(_vec(estimates).mean() - truth)


def metric_rmse(estimates, truth: float) -> float:
    """``sqrt(bias^2 + V_emp)`` with the ``n - 1`` divisor in ``V_emp``; NaN for a single estimate."""
    e = _vec(estimates)
    if e.size < 2:
        return math.nan
    return float(math.sqrt(metric_bias(e, truth) ** 2 + e.var(ddof=1)))


def metric_ase_esd(se_estimates, estimates) -> float:
    """Average standard error over the empirical standard deviation of the estimates."""
    se, e = _vec(se_estimates), _vec(estimates)
    if e.size < 2:
        return math.nan
    esd = e.std(ddof=1)
    return float(se.mean() / esd) if esd > 0 else math.nan


def metric_coverage(intervals, truth: float) -> float:
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    if iv.shape[0] == 0:
        raise ValueError("empty input")
    return float(np.mean((iv[:, 0] <= truth) & (truth <= iv[:, 1])))


def wald_interval(est, se, z: float = Z95) -> np.ndarray:
    est, se = np.asarray(est, dtype=float), np.asarray(se, dtype=float)
    return np.stack([est - z * se, est + z * se], axis=-1)


# --- table ----------------------------------------------------------------------


COLUMNS = ("method", "coef", "n", "bias", "rmse", "ase_esd", "coverage", "avg_width")


@dataclass(frozen=True, eq=False)
class MetricsTable:
    """Per method and coefficient summaries plus the per-replicate records behind them."""

    rows: tuple
    records: tuple = field(repr=False, default=())
    n_failed: int = 0
    coef_names: tuple = ()
    degenerate: bool = False

    def get(self, method: str, coef, metric: str) -> float:
        if isinstance(coef, int):
            coef = self.coef_names[coef]
        for r in self.rows:
            if r["method"] == method and r["coef"] == coef:
                return r[metric]
        raise KeyError((method, coef))

    @property
    def methods(self) -> list:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(COLUMNS) + "\n")
        for r in self.rows:
            buf.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in COLUMNS) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [list(COLUMNS)]
        for r in self.rows:
            cells.append([f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in COLUMNS])
        widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
        lines = ["  ".join(c.rjust(w) if i > 1 else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in cells]
        return "\n".join(lines) + "\n"

    def records_csv(self) -> str:
        """Long-format per-replicate estimates: ``rep, method, coef, estimate, se, lo, hi``."""
        buf = io.StringIO()
        buf.write("rep,method,coef,estimate,se,lo,hi\n")
        for rec in self.records:
            if rec.get("failed"):
                continue
            for m, out in rec["methods"].items():
                for j, name in enumerate(self.coef_names):
                    vals = [out["est"][j], _at(out["se"], j), _at(out["lo"], j), _at(out["hi"], j)]
                    buf.write(f"{rec['rep']},{m},{name}," + ",".join(repr(float(v)) for v in vals) + "\n")
        return buf.getvalue()

    def bc_improvement_rate(self) -> float:
        """Share of replicates where the bias-corrected ``sigma2_rho`` is closer to the truth."""
        hits = [abs(r["spatial_bc"][0] - r["truth"][0]) < abs(r["spatial_cnr"][0] - r["truth"][0])
                for r in self.records if r.get("spatial_bc") is not None]
        return float(np.mean(hits)) if hits else math.nan


def _at(v, j):
    return math.nan if v is None else v[j]


# --- replicates -----------------------------------------------------------------


def _out(est, se=None, interval=None):
    est = np.asarray(est, dtype=float)
    if se is not None and interval is None:
        interval = wald_interval(est, se)
    lo = None if interval is None else np.asarray(interval)[:, 0]
    hi = None if interval is None else np.asarray(interval)[:, 1]
    return {"est": est, "se": None if se is None else np.asarray(se, dtype=float), "lo": lo, "hi": hi}


def _replicate(args):
    cfg, locs_S, locs_St, r = args
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return _replicate_inner(cfg, locs_S, locs_St, r)
    except (CnrError, np.linalg.LinAlgError) as exc:
        log.warning("replicate %d failed: %s", r, exc)
        return {"rep": r, "failed": f"{type(exc).__name__}: {exc}"}


def _replicate_inner(cfg: ScenarioConfig, locs_S, locs_St, r):
    rng = stream(cfg.master_seed, "bench-data", r)
    truth = cfg.slmm_true
    y, x_tilde, x_S = bootstrap.simulate_dataset(cfg.theta_x_true, truth, truth.beta, cfg.specs,
                                                 locs_S, locs_St, rng, nu_rho=truth.nu_rho)
    data = MisalignedDataset(y, locs_S, x_tilde, locs_St)
    methods = set(cfg.methods)
    out, rec = {}, {"rep": r, "truth": truth.spatial, "failed": None}

    fit = cnr_fit(data, cfg.specs, nu_x=cfg.nu_x, nu_rho=truth.nu_rho)
    rec["spatial_cnr"] = fit.spatial
    beta_hat = fit.beta
    if "cnr" in methods:
        out["cnr"] = _out(beta_hat)
    if "naive" in methods:
        out["naive"] = _out(beta_hat, fit.slmm.standard_errors())

    variants = [v for m, v in _BOOT.items() if m in methods]
    need_prelim = bool({"bc_cnr", "naive_bc", "bootstrap", "ncc"} & methods)
    if need_prelim and bootstrap.PROPOSED not in variants and bootstrap.NON_CROSS_CORRELATED not in variants:
        variants.append(bootstrap.PROPOSED)
    rec["spatial_bc"] = None
    if variants:
        seed = int(stream(cfg.master_seed, "bench-boot", r).integers(2**63))
        bcfg = bootstrap.BootstrapConfig(cfg.T, cfg.T, master_seed=seed, band_points=2)
        res = bootstrap.run_variants(data, fit, bcfg, variants, nu_x=cfg.nu_x)
        for m, v in _BOOT.items():
            if m in methods:
                b = res[v]
                out[m] = _out(beta_hat, b.standard_errors(), b.intervals)
        any_bc = next((b for b in res.values() if b.bc_params is not None), None)
        if any_bc is not None:
            bc = any_bc.bc_params
            rec["spatial_bc"] = bc.as_array()
            rec["n_dropped_prelim"] = any_bc.n_dropped_prelim
            if "bc_cnr" in methods:
                out["bc_cnr"] = _out(any_bc.beta_bc)
            if "naive_bc" in methods:
                cov = slmm.naive_variance(fit.slmm, bc.sigma2_rho_bc, bc.alpha_rho_bc, bc.tau_eps_bc)
                out["naive_bc"] = _out(beta_hat, np.sqrt(np.diag(cov)))
        rec["n_dropped"] = {v: res[v].n_dropped for v in res}

    for m in sorted(methods):
        L = _nmr_L(m)
        if L is not None:
            f = nmr_fit(y, x_tilde, locs_St, locs_S, L, cfg.specs, nu_rho=truth.nu_rho)
            out[m] = _out(f.beta, f.standard_errors())
    if "oracle" in methods:
        design = slmm.build_design(x_S, cfg.specs)
        f = slmm.fit(y, design, locs_S, truth.nu_rho)
        out["oracle"] = _out(f.beta, f.standard_errors())
    rec["methods"] = {m: out[m] for m in _ordered(cfg.methods) if m in out}
    return rec


def _ordered(methods) -> list:
    known = [m for m in METHODS if m in methods]
    extra = sorted((m for m in methods if m not in METHODS), key=lambda m: _nmr_L(m))
    return known + extra


def _coef_names(cfg: ScenarioConfig) -> tuple:
    names = ["b0"]
    j = 1
    for s in cfg.specs:
        for _ in range(s.n_columns):
            names.append(f"b{j}")
            j += 1
    return tuple(names)


def aggregate(records, cfg: ScenarioConfig) -> MetricsTable:
    ok = [r for r in records if not r.get("failed")]
    failed = len(records) - len(ok)
    names = _coef_names(cfg)
    rows = []
    if ok:
        for m in _ordered(cfg.methods):
            outs = [r["methods"][m] for r in ok]
            est = np.array([o["est"] for o in outs])
            for j, name in enumerate(names):
                truth = float(cfg.beta_true[j])
                e = est[:, j]
                row = {"method": m, "coef": name, "n": len(outs),
                       "bias": metric_bias(e, truth), "rmse": metric_rmse(e, truth),
                       "ase_esd": math.nan, "coverage": math.nan, "avg_width": math.nan}
                if outs[0]["se"] is not None:
                    se = np.array([o["se"][j] for o in outs])
                    iv = np.array([[o["lo"][j], o["hi"][j]] for o in outs])
                    row["ase_esd"] = metric_ase_esd(se, e)
                    row["coverage"] = metric_coverage(iv, truth)
                    row["avg_width"] = float(np.mean(iv[:, 1] - iv[:, 0]))
                rows.append(row)
    degenerate = len(ok) < 2
    if degenerate:
        warnings.warn("fewer than two successful replicates; spread-based metrics are undefined",
                      RuntimeWarning, stacklevel=2)
    return MetricsTable(tuple(rows), tuple(records), failed, names, degenerate)


def run_scenario(cfg: ScenarioConfig, *, progress=None) -> MetricsTable:
    """Simulate ``n_reps`` datasets from the true model, apply every method, and summarize."""
    locs_S, locs_St = cfg.layout()
    tasks = [(replace(cfg, workers=1), locs_S, locs_St, r) for r in range(cfg.n_reps)]
    records = ordered_map(_replicate, tasks, cfg.workers)
    if progress is not None:
        progress(f"{sum(1 for r in records if not r.get('failed'))} of {cfg.n_reps} replicates succeeded")
    return aggregate(records, cfg)
