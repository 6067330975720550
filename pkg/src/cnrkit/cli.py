"""``cnrkit`` command line: fit, bootstrap, predict, simulate, benchmark."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__, bench, bootstrap, config, io, slmm
from .cnr import cnr_fit
from .cokrige import cokrige_marginal, prediction_grid
from .covariate_field import fit_covariate_field
from .errors import DegenerateInputError, NumericError, SchemaError
from .gaussian import stream
from .geo import LocationSet

log = logging.getLogger("cnrkit")

EXIT_OK, EXIT_SCHEMA, EXIT_NUMERIC, EXIT_DEGENERATE = 0, 2, 3, 4


# --- helpers ---------------------------------------------------------------------


def _specs(cfg: dict, k: int):
    basis = cfg["model"]["basis"]
    names = [basis] * k if isinstance(basis, str) else list(basis)
    if len(names) != k:
        raise SchemaError(f"{len(names)} basis specs for {k} covariates")
    try:
        return tuple(slmm.BasisSpec.parse(b) for b in names)
    except ValueError as exc:
        raise SchemaError(str(exc)) from None


def _nu_x(cfg: dict, k: int):
    nu = cfg["model"]["nu_x"]
    if isinstance(nu, list):
        if len(nu) != k:
            raise SchemaError(f"{len(nu)} smoothness values for {k} covariates")
        return np.asarray(nu, dtype=float)
    return float(nu)


def _load_data(cfg: dict):
    d = cfg["data"]
    if "response" not in d or "covariates" not in d:
        raise SchemaError("data.response and data.covariates are required")
    return io.ingest(d["response"], d["covariates"], response_column=d.get("response_column"),
                     covariate_columns=d.get("covariate_columns"), metric=cfg["metric"],
                     log_response=d.get("log_response", False))


def _fit(cfg: dict, data):
    specs = _specs(cfg, data.K)
    fit = cnr_fit(data, specs, nu_x=_nu_x(cfg, data.K), nu_rho=cfg["model"]["nu_rho"],
                  standardize_R=cfg["model"]["standardize_R"])
    return specs, fit


def _write_fit(out: Path, data, fit) -> list:
    th = fit.theta_x
    files = [io.write_csv(out / "theta_x.csv", ["covariate", "mu", "sigma2", "alpha", "tau", "nu"],
                          [[n, m.mu, m.sigma2, m.alpha, m.tau, m.nu] for n, m in zip(data.covariate_names, th.marginals)])]
    files.append(io.write_csv(out / "R.csv", ["covariate", *data.covariate_names],
                              [[n, *row] for n, row in zip(data.covariate_names, th.R)]))
    names = fit.slmm.design.column_names()
    se = fit.slmm.standard_errors()
    files.append(io.write_csv(out / "coefficients.csv", ["term", "estimate", "naive_se"],
                              [[n, b, s] for n, b, s in zip(names, fit.beta, se)]))
    p = fit.slmm.params
    files.append(io.write_csv(out / "spatial.csv", ["parameter", "value"],
                              [["sigma2_rho", p.sigma2_rho], ["nu_rho", p.nu_rho], ["alpha_rho", p.alpha_rho],
                               ["tau_eps", p.tau_eps], ["loglik", fit.slmm.loglik]]))
    return files


def _write_manifest(out: Path, command: str, cfg: dict, files) -> Path:
    entries = []
    for f in sorted(Path(f) for f in files):
        entries.append({"file": f.name, "sha256": hashlib.sha256(f.read_bytes()).hexdigest()})
    manifest = {
        "command": command,
        "config_sha256": config.config_hash(cfg),
        "seed": cfg["seed"],
        "config": cfg,
        "versions": {"cnrkit": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _scenario(cfg: dict) -> bench.ScenarioConfig:
    sc = dict(cfg["scenario"])
    preset = sc.pop("preset")
    sc.pop("rep", None)
    kw = {k: v for k, v in sc.items() if k in ("M", "N", "n_reps", "T")}
    if "methods" in sc:
        kw["methods"] = tuple(sc["methods"])
    if "bbox" in sc:
        kw["bbox"] = tuple(sc["bbox"])
    make = bench.ScenarioConfig.full if preset == "full" else bench.ScenarioConfig.desk
    try:
        return make(master_seed=cfg["seed"], metric=cfg["metric"], workers=cfg["workers"], **kw)
    except ValueError as exc:
        raise SchemaError(str(exc)) from None


# --- subcommands -----------------------------------------------------------------


def cmd_fit(cfg: dict, out: Path) -> list:
    data = _load_data(cfg)
    specs, fit = _fit(cfg, data)
    files = _write_fit(out, data, fit)
    for k, name in enumerate(data.covariate_names):
        grid = bootstrap.band_grid(fit, cfg["bootstrap"]["band_points"])[k]
        val, lo, hi = slmm.smoother_band(fit.slmm, k, grid)
        files.append(io.write_csv(out / f"smoother_{name}.csv", ["x", "fit", "lower", "upper"],
                                  zip(grid, val, lo, hi)))
    return files


def cmd_bootstrap(cfg: dict, out: Path) -> list:
    data = _load_data(cfg)
    specs, fit = _fit(cfg, data)
    b = cfg["bootstrap"]
    bcfg = bootstrap.BootstrapConfig(b["T_prelim"], b["T_second"], b["variant"], cfg["seed"],
                                     b["failure_policy"], b["level"], b["band_points"], workers=cfg["workers"])
    res = bootstrap.run(data, fit, bcfg, nu_x=_nu_x(cfg, data.K))
    files = _write_fit(out, data, fit)
    names = fit.slmm.design.column_names()
    se = res.standard_errors()
    files.append(io.write_csv(out / "intervals.csv", ["term", "estimate", "boot_se", "lower", "upper"],
                              [[n, e, s, lo, hi] for n, e, s, (lo, hi) in zip(names, fit.beta, se, res.intervals)]))
    c = slmm.default_conditioning(fit.slmm)
    for k, name in enumerate(data.covariate_names):
        val = slmm.conditional_smoother(fit.slmm, k, res.band_grid[k], c)
        files.append(io.write_csv(out / f"band_{name}.csv", ["x", "fit", "lower", "upper"],
                                  zip(res.band_grid[k], val, res.bands[k, :, 0], res.bands[k, :, 1])))
    rows = [["variant", res.variant], ["T", res.T], ["n_dropped", res.n_dropped],
            ["n_dropped_prelim", res.n_dropped_prelim]]
    if res.bc_params is not None:
        bc = res.bc_params
        rows += [["sigma2_rho_bc", bc.sigma2_rho_bc], ["alpha_rho_bc", bc.alpha_rho_bc],
                 ["tau_eps_bc", bc.tau_eps_bc]]
    files.append(io.write_csv(out / "bootstrap_summary.csv", ["key", "value"], rows))
    if res.beta_bc is not None:
        files.append(io.write_csv(out / "bc_coefficients.csv", ["term", "estimate"], zip(names, res.beta_bc)))
    print(f"bootstrap ({res.variant}): {res.T} replicates kept, {res.n_dropped} dropped", file=sys.stderr)
    return files


def _mask(path: str, lon, lat) -> np.ndarray:
    try:
        import shapely
        from shapely import wkt
        from shapely.geometry import shape
    except ImportError:
        raise SchemaError("polygon masks need the optional 'shapely' package") from None
    text = Path(path).read_text()
    try:
        geom = shape(json.loads(text).get("geometry", json.loads(text))) if text.lstrip().startswith("{") \
            else wkt.loads(text)
    except Exception as exc:
        raise SchemaError(f"cannot parse mask {path}: {exc}") from None
    return shapely.contains_xy(geom, lon, lat)


def cmd_predict(cfg: dict, out: Path) -> list:
    p = cfg["predict"]
    if "bbox" not in p:
        raise SchemaError("predict.bbox is required")
    d = cfg["data"]
    if "covariates" not in d:
        raise SchemaError("data.covariates is required")
    table = io.read_station_file(d["covariates"])
    names = tuple(d.get("covariate_columns") or table.columns)
    if not names:
        raise SchemaError("covariate file has no variable columns")
    x = np.column_stack([table.column(n) for n in names])
    try:
        locs = LocationSet(table.coords, cfg["metric"], ids=table.ids)
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    theta = fit_covariate_field(x, locs, _nu_x(cfg, len(names)), standardize_R=cfg["model"]["standardize_R"])
    try:
        grid = prediction_grid(p["bbox"], p["cell"], cfg["metric"])
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    lon, lat = grid.coords[:, 0], grid.coords[:, 1]
    keep = np.ones(len(grid), dtype=bool) if "mask" not in p else _mask(p["mask"], lon, lat)
    if not keep.any():
        raise DegenerateInputError("mask removes every grid cell")
    pred = cokrige_marginal(theta, x, locs, grid).values
    rows = ([lo, la, *v] for lo, la, v, k in zip(lon, lat, pred, keep) if k)
    return [io.write_csv(out / "grid.csv", ["lon", "lat", *names], rows)]


def cmd_simulate(cfg: dict, out: Path) -> list:
    sc = _scenario(cfg)
    locs_S, locs_St = sc.layout()
    rep = cfg["scenario"].get("rep", 0)
    truth = sc.slmm_true
    y, x_tilde, x_S = bootstrap.simulate_dataset(sc.theta_x_true, truth, truth.beta, sc.specs, locs_S, locs_St,
                                                 stream(sc.master_seed, "bench-data", rep), nu_rho=truth.nu_rho)
    names = [f"x{k + 1}" for k in range(sc.K)]
    return [io.write_station_file(out / "response.csv", locs_S, ["y"], y),
            io.write_station_file(out / "covariates.csv", locs_St, names, x_tilde),
            io.write_station_file(out / "hidden_covariates.csv", locs_S, names, x_S)]


def cmd_benchmark(cfg: dict, out: Path) -> list:
    sc = _scenario(cfg)
    table = bench.run_scenario(sc, progress=lambda m: print(m, file=sys.stderr))
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name, text in (("metrics.csv", table.to_csv()), ("metrics.txt", table.to_text()),
                       ("replicates.csv", table.records_csv())):
        (out / name).write_text(text)
        files.append(out / name)
    sys.stdout.write(table.to_text())
    return files


COMMANDS = {"fit": cmd_fit, "bootstrap": cmd_bootstrap, "predict": cmd_predict,
            "simulate": cmd_simulate, "benchmark": cmd_benchmark}


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnrkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cnrkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="TOML run configuration")
        p.add_argument("-o", "--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="worker processes; 0 means all cores")
        p.add_argument("--metric", choices=["great_circle", "euclidean"])
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("fit", "bootstrap", "predict"):
            p.add_argument("--response", help="response station CSV")
            p.add_argument("--covariates", help="covariate station CSV")
            p.add_argument("--basis", help="basis for every covariate: linear, polyD or nsK")
        if name == "bootstrap":
            p.add_argument("--variant", choices=["proposed", "unadjusted", "ncc"])
            p.add_argument("-T", type=int, dest="T", help="replicates in each phase")
        if name == "predict":
            p.add_argument("--bbox", type=float, nargs=4, metavar=("LON0", "LON1", "LAT0", "LAT1"))
            p.add_argument("--cell", type=float)
            p.add_argument("--mask", help="polygon as WKT or GeoJSON")
        if name in ("simulate", "benchmark"):
            p.add_argument("--preset", choices=["desk", "full"])
            p.add_argument("--reps", type=int, dest="n_reps")
            p.add_argument("-T", type=int, dest="T")
            p.add_argument("--rep", type=int, help="replicate index to emit (simulate)")
    return parser


def _overrides(args) -> dict:
    g = vars(args)
    ov = {"seed": g.get("seed"), "workers": g.get("workers"), "metric": g.get("metric"),
          "output_dir": g.get("out"),
          "data": {"response": g.get("response"), "covariates": g.get("covariates")},
          "model": {"basis": g.get("basis")},
          "predict": {"bbox": g.get("bbox"), "cell": g.get("cell"), "mask": g.get("mask")},
          "scenario": {"preset": g.get("preset"), "n_reps": g.get("n_reps"), "rep": g.get("rep")}}
    if args.command == "bootstrap":
        ov["bootstrap"] = {"variant": g.get("variant"), "T_prelim": g.get("T"), "T_second": g.get("T")}
    if args.command in ("simulate", "benchmark"):
        ov["scenario"]["T"] = g.get("T")
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config.load(args.config, _overrides(args))
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            files = COMMANDS[args.command](cfg, out)
        _write_manifest(out, args.command, cfg, files)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except DegenerateInputError as exc:
        print(f"degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (NumericError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
