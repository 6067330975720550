"""Run configuration: TOML files validated against a JSON schema."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

import jsonschema

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import SchemaError

_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_NU = {"oneOf": [_POS_NUM, {"type": "array", "items": _POS_NUM, "minItems": 1}]}
_BASIS = {"oneOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}, "minItems": 1}]}
_BBOX = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "metric": {"enum": ["great_circle", "euclidean", "haversine"]},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "output_dir": {"type": "string"},
        "workers": {"type": "integer", "minimum": 0},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "response": {"type": "string"},
                "covariates": {"type": "string"},
                "response_column": {"type": "string"},
                "covariate_columns": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "log_response": {"type": "boolean"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "nu_x": _NU,
                "nu_rho": _POS_NUM,
                "basis": _BASIS,
                "standardize_R": {"type": "boolean"},
            },
        },
        "bootstrap": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T_prelim": _POS_INT,
                "T_second": _POS_INT,
                "variant": {"enum": ["proposed", "unadjusted", "ncc"]},
                "failure_policy": {"enum": ["drop", "abort"]},
                "level": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "band_points": {"type": "integer", "minimum": 2},
            },
        },
        "predict": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bbox": _BBOX,
                "cell": _POS_NUM,
                "mask": {"type": "string"},
            },
        },
        "scenario": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["desk", "full"]},
                "M": _POS_INT,
                "N": _POS_INT,
                "n_reps": _POS_INT,
                "T": _POS_INT,
                "methods": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "bbox": _BBOX,
                "rep": {"type": "integer", "minimum": 0},
            },
        },
    },
}

DEFAULTS = {
    "metric": "great_circle",
    "seed": 0,
    "output_dir": "cnr-out",
    "workers": 0,
    "data": {"log_response": False},
    "model": {"nu_x": 0.5, "nu_rho": 0.5, "basis": "linear", "standardize_R": False},
    "bootstrap": {"T_prelim": 250, "T_second": 250, "variant": "proposed", "failure_policy": "drop",
                  "level": 0.95, "band_points": 50},
    "predict": {"cell": 0.1},
    "scenario": {"preset": "desk", "rep": 0},
}


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``None`` values in ``override`` are skipped."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if v is None:
            continue
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"config error at {where}: {exc.message}") from None
    return cfg


def load(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the TOML file, then ``overrides``; validated before return."""
    raw = {}
    if path is not None:
        try:
            with Path(path).open("rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise SchemaError(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise SchemaError(f"{path}: {exc}") from None
        validate(raw)
    cfg = merge(merge(DEFAULTS, raw), overrides or {})
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
