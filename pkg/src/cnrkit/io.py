"""Station CSV ingestion, hourly wind aggregation and CSV writers."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cnr import MisalignedDataset
from .errors import DegenerateInputError, SchemaError
from .geo import GREAT_CIRCLE, LocationSet

ID, LON, LAT = "station_id", "lon", "lat"
SECTORS = ("NE", "SE", "SW", "NW")


@dataclass(frozen=True, eq=False)
class StationTable:
    ids: tuple
    coords: np.ndarray
    columns: tuple
    values: np.ndarray

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.columns.index(name)]
        except ValueError:
            raise SchemaError(f"column {name!r} not found; available: {list(self.columns)}") from None


def _number(text: str, where: str) -> float:
    if text is None or text.strip() == "":
        raise SchemaError(f"missing value at {where}")
    try:
        v = float(text)
    except ValueError:
        raise SchemaError(f"not a number at {where}: {text!r}") from None
    if not math.isfinite(v):
        raise SchemaError(f"non-finite value at {where}")
    return v


def read_station_file(path) -> StationTable:
    """Parse ``station_id, lon, lat, var1, ...``; every cell must be present."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if header[:3] != [ID, LON, LAT]:
            raise SchemaError(f"{path}: header must start with {ID},{LON},{LAT}; got {header[:3]}")
        if len(set(header)) != len(header):
            raise SchemaError(f"{path}: duplicate column names")
        ids, rows, seen = [], [], set()
        for line_no, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            sid = row[0].strip()
            if sid in seen:
                raise SchemaError(f"{path}:{line_no}: duplicate station_id {sid!r}")
            seen.add(sid)
            ids.append(sid)
            rows.append([_number(c, f"{path}:{line_no}:{header[j + 1]}") for j, c in enumerate(row[1:])])
    if not rows:
        raise DegenerateInputError(f"{path}: no station rows")
    arr = np.array(rows, dtype=float)
    lon, lat = arr[:, 0], arr[:, 1]
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 360):
        raise SchemaError(f"{path}: coordinates out of range")
    return StationTable(tuple(ids), arr[:, :2], tuple(header[3:]), arr[:, 2:])


def ingest(path_response, path_covariates, *, response_column: str | None = None, covariate_columns=None,
           metric: str = GREAT_CIRCLE, log_response: bool = False) -> MisalignedDataset:
    """Build a misaligned dataset from a response station file and a covariate station file."""
    resp = read_station_file(path_response)
    cov = read_station_file(path_covariates)
    if response_column is None:
        if len(resp.columns) != 1:
            raise SchemaError(f"response file has columns {list(resp.columns)}; choose one")
        response_column = resp.columns[0]
    y = resp.column(response_column)
    if log_response:
        if np.any(y <= 0):
            raise DegenerateInputError("log transform needs a positive response")
        y = np.log(y)
    names = tuple(covariate_columns) if covariate_columns else cov.columns
    if not names:
        raise SchemaError("covariate file has no variable columns")
    x = np.column_stack([cov.column(n) for n in names])
    try:
        locs_S = LocationSet(resp.coords, metric, ids=resp.ids)
        locs_St = LocationSet(cov.coords, metric, ids=cov.ids)
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    shared = _shared_locations(resp.coords, cov.coords)
    if shared:
        warnings.warn(f"{shared} response locations coincide with covariate stations", UserWarning, stacklevel=2)
    return MisalignedDataset(y, locs_S, x, locs_St, names, response_column)


def _shared_locations(a, b) -> int:
    sb = {tuple(r) for r in np.asarray(b)}
    return sum(tuple(r) in sb for r in np.asarray(a))


# --- wind --------------------------------------------------------------------


def wind_sector(direction_deg) -> np.ndarray:
    """Sector index 0..3 for NE [0,90), SE [90,180), SW [180,270), NW [270,360]."""
    d = np.asarray(direction_deg, dtype=float)
    if np.any(~np.isfinite(d)) or np.any((d < 0) | (d > 360)):
        raise SchemaError("wind directions must lie in [0, 360]")
    return np.minimum((d // 90).astype(int), 3)


@dataclass(frozen=True, eq=False)
class WindSummary:
    """Mean wind speed per station and sector; ``empty`` marks sectors without any hour."""

    stations: tuple
    values: np.ndarray
    empty: np.ndarray

    def sector(self, name: str) -> np.ndarray:
        return self.values[:, SECTORS.index(name)]


def aggregate_wind(hourly) -> WindSummary:
    """Direction-conditional mean speed from ``(station, hour, speed, direction)`` records."""
    recs = list(hourly)
    if not recs:
        raise DegenerateInputError("no hourly wind records")
    stations = tuple(dict.fromkeys(r[0] for r in recs))
    index = {s: i for i, s in enumerate(stations)}
    st = np.array([index[r[0]] for r in recs])
    speed = np.array([float(r[2]) for r in recs])
    sec = wind_sector([r[3] for r in recs])
    sums = np.zeros((len(stations), 4))
    counts = np.zeros((len(stations), 4))
    np.add.at(sums, (st, sec), speed)
    np.add.at(counts, (st, sec), 1.0)
    empty = counts == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(empty, np.nan, sums / np.where(empty, 1.0, counts))
    return WindSummary(stations, values, empty)


# --- writers -----------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows) -> Path:
    """Plain CSV with full-precision floats and ``\\n`` line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def write_station_file(path, locs: LocationSet, columns, values) -> Path:
    values = np.asarray(values, dtype=float).reshape(len(locs), -1)
    ids = locs.ids or tuple(f"s{i:04d}" for i in range(len(locs)))
    rows = ([sid, c[0], c[1], *v] for sid, c, v in zip(ids, locs.coords, values))
    return write_csv(path, [ID, LON, LAT, *columns], rows)
