"""CSV dataset formats.

A dataset is a directory:

* ``counts.csv``: ``year,count``
* ``covariates.csv``: ``year,voles,frost_days``
* ``marray.csv`` (herons) or ``marray_<age>_<gender>.csv`` (owls, ages
  ``juv``/``adult``, genders ``m``/``f``): ``release_year,R,<year>...,never_seen``
  where each ``<year>`` column counts first re-encounters in that year
* ``fecundity.csv`` (owls): ``year,N,n``

Integer fields are parsed strictly; every error names the file, row and
column.  Years in covariates and m-arrays must match the count years.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import CountSeries
from .models.common import CovariateTable, MArray
from .models.herons import HeronsData
from .models.owls import GROUPS, OwlsData


class DataError(ValueError):
    """Malformed dataset file."""


def _read(path: Path, required: list[str]):
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    body = []
    for i, r in enumerate(rows[1:], start=2):
        if not any(c.strip() for c in r):
            continue
        if len(r) != len(header):
            raise DataError(f"{path}: row {i} has {len(r)} fields, header has {len(header)}")
        body.append((i, dict(zip(header, (c.strip() for c in r)))))
    if not body:
        raise DataError(f"{path}: no data rows")
    return header, body


def _int(path, row, col, text, minimum=0):
    try:
        v = int(text)
    except ValueError:
        raise DataError(f"{path}: row {row}, column '{col}': expected an integer, got {text!r}") from None
    if minimum is not None and v < minimum:
        raise DataError(f"{path}: row {row}, column '{col}': must be >= {minimum}, got {v}")
    return v


def _float(path, row, col, text):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}: row {row}, column '{col}': expected a number, got {text!r}") from None
    if not np.isfinite(v):
        raise DataError(f"{path}: row {row}, column '{col}': must be finite")
    return v


def read_counts(path) -> CountSeries:
    path = Path(path)
    _, body = _read(path, ["year", "count"])
    years = [_int(path, i, "year", r["year"], None) for i, r in body]
    counts = [_int(path, i, "count", r["count"]) for i, r in body]
    if np.any(np.diff(years) != 1):
        raise DataError(f"{path}: years must be consecutive and increasing")
    return CountSeries(np.array(counts), np.array(years))


def read_covariates(path, years) -> CovariateTable:
    path = Path(path)
    _, body = _read(path, ["year", "voles", "frost_days"])
    by_year = {}
    for i, r in body:
        y = _int(path, i, "year", r["year"], None)
        if y in by_year:
            raise DataError(f"{path}: row {i}: duplicate year {y}")
        voles = _int(path, i, "voles", r["voles"])
        if voles not in (0, 1):
            raise DataError(f"{path}: row {i}, column 'voles': must be 0 or 1")
        by_year[y] = (voles, _float(path, i, "frost_days", r["frost_days"]))
    missing = [int(y) for y in years if int(y) not in by_year]
    if missing:
        raise DataError(f"{path}: missing covariates for year(s) {missing}")
    vals = np.array([by_year[int(y)] for y in years], dtype=float)
    return CovariateTable(np.asarray(years), vals[:, 0], vals[:, 1])


def read_marray(path, years) -> MArray:
    path = Path(path)
    header, body = _read(path, ["release_year", "R", "never_seen"])
    year0 = int(years[0])
    occ_cols = [h for h in header if h not in ("release_year", "R", "never_seen")]
    occ = []
    for c in occ_cols:
        try:
            occ.append(int(c) - year0)
        except ValueError:
            raise DataError(f"{path}: column '{c}' is not a year") from None
    rel, rows = [], []
    for i, r in body:
        ry = _int(path, i, "release_year", r["release_year"], None)
        R = _int(path, i, "R", r["R"])
        cells = [_int(path, i, c, r[c]) for c in occ_cols] + [_int(path, i, "never_seen", r["never_seen"])]
        if sum(cells) != R:
            raise DataError(f"{path}: row {i}: cells sum to {sum(cells)} but R = {R}")
        for c, v in zip(occ_cols, cells):
            if v and int(c) <= ry:
                raise DataError(f"{path}: row {i}, column '{c}': re-encounter at or before release year")
        rel.append(ry - year0)
        rows.append(cells)
    if min(rel) < 0 or max(occ, default=-1) >= len(years):
        raise DataError(f"{path}: release or occasion years outside the count years")
    try:
        return MArray(np.array(rel), np.array(occ), np.array(rows))
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None


def read_fecundity(path, years):
    path = Path(path)
    _, body = _read(path, ["year", "N", "n"])
    by_year = {}
    for i, r in body:
        by_year[_int(path, i, "year", r["year"], None)] = (
            _int(path, i, "N", r["N"]), _int(path, i, "n", r["n"]))
    missing = [int(y) for y in years if int(y) not in by_year]
    if missing:
        raise DataError(f"{path}: missing fecundity records for year(s) {missing}")
    v = np.array([by_year[int(y)] for y in years], dtype=np.int64)
    return v[:, 0], v[:, 1]


def owls_marray_file(age, gender) -> str:
    return f"marray_{age}_{gender}.csv"


def load_dataset(family: str, directory):
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: data directory not found")
    counts = read_counts(d / "counts.csv")
    cov = read_covariates(d / "covariates.csv", counts.years)
    try:
        if family == "owls":
            marrays = {g: read_marray(d / owls_marray_file(*g), counts.years) for g in GROUPS}
            N, n = read_fecundity(d / "fecundity.csv", counts.years)
            return OwlsData(counts, marrays, N, n, cov)
        if family == "herons":
            return HeronsData(counts, read_marray(d / "marray.csv", counts.years), cov)
    except DataError:
        raise
    except ValueError as e:
        raise DataError(f"{d}: {e}") from None
    raise DataError(f"unknown model family {family!r}")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_marray(path, m: MArray, years) -> None:
    years = np.asarray(years)
    header = ["release_year", "R", *(str(int(years[s])) for s in m.occasions), "never_seen"]
    rows = [[int(years[t]), int(row.sum()), *map(int, row)] for t, row in zip(m.release_times, m.counts)]
    _write_rows(path, header, rows)


def write_dataset(data, directory) -> list[str]:
    """Write ``data`` in the CSV layout above; returns the file names written."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    years = data.counts.years
    _write_rows(d / "counts.csv", ["year", "count"], [[int(y), int(c)] for y, c in zip(years, data.counts.values)])
    cov = data.covariates
    _write_rows(d / "covariates.csv", ["year", "voles", "frost_days"],
                [[int(y), int(v), repr(float(f))] for y, v, f in zip(cov.years, cov.voles, cov.frost_days)])
    files = ["counts.csv", "covariates.csv"]
    if isinstance(data, OwlsData):
        for g in GROUPS:
            write_marray(d / owls_marray_file(*g), data.marrays[g], years)
            files.append(owls_marray_file(*g))
        _write_rows(d / "fecundity.csv", ["year", "N", "n"],
                    [[int(y), int(a), int(b)] for y, a, b in zip(years, data.fecundity_N, data.fecundity_n)])
        files.append("fecundity.csv")
    else:
        write_marray(d / "marray.csv", data.marray, years)
        files.append("marray.csv")
    return files


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


__all__ = [
    "DataError", "read_counts", "read_covariates", "read_marray", "read_fecundity", "load_dataset",
    "write_marray", "write_dataset", "write_json", "owls_marray_file",
]
