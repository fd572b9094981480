"""Longitudinal dataset container and wide/long CSV ingestion.

The wide schema has one row per individual:

    id, t_1..t_J, y_1..y_J, x_1..x_J, xe, xg1, xg2[, label]

Empty cells in the y and x blocks mark missing measurements (handled by
FIML); times, xe and the gating covariates must be complete.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Individual:
    """Read-only view of one row of a dataset."""

    id: str
    times: np.ndarray
    y: np.ndarray
    x: np.ndarray | None
    x_e: float | None
    x_g: np.ndarray | None


@dataclass
class LongitudinalDataset:
    """Per-individual measurement times, outcome and covariate blocks."""

    times: np.ndarray
    y: np.ndarray
    x: np.ndarray | None = None
    x_e: np.ndarray | None = None
    x_g: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)
    labels: np.ndarray | None = None
    true_theta: object = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.times.ndim != 2 or self.y.shape != self.times.shape:
            raise ValueError("times and y must both have shape (n, J)")
        if np.any(np.diff(self.times, axis=1) <= 0):
            bad = int(np.where(np.any(np.diff(self.times, axis=1) <= 0, axis=1))[0][0])
            raise ValueError(f"times not strictly increasing for individual {self._name(bad)}")
        if not np.all(np.isfinite(self.times)):
            bad = int(np.where(~np.all(np.isfinite(self.times), axis=1))[0][0])
            raise ValueError(f"missing or non-finite time for individual {self._name(bad)}")
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=float)
            if self.x.shape != self.times.shape:
                raise ValueError("x block must match times shape")
        if self.x_e is not None:
            self.x_e = np.asarray(self.x_e, dtype=float)
            if self.x_e.shape != (self.n,):
                raise ValueError("x_e must have one value per individual")
            if not np.all(np.isfinite(self.x_e)):
                bad = int(np.where(~np.isfinite(self.x_e))[0][0])
                raise ValueError(f"missing x_e for individual {self._name(bad)}")
        if self.x_g is not None:
            self.x_g = np.asarray(self.x_g, dtype=float)
            if self.x_g.ndim != 2 or self.x_g.shape[0] != self.n:
                raise ValueError("x_g must have shape (n, n_gating_tics)")
            if not np.all(np.isfinite(self.x_g)):
                bad = int(np.where(~np.all(np.isfinite(self.x_g), axis=1))[0][0])
                raise ValueError(f"missing gating covariate for individual {self._name(bad)}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
        if not self.ids:
            self.ids = [str(i + 1) for i in range(self.n)]

    def _name(self, i: int) -> str:
        return self.ids[i] if self.ids else str(i + 1)

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def n_waves(self) -> int:
        return self.times.shape[1]

    def individual(self, i: int) -> Individual:
        return Individual(
            id=self.ids[i],
            times=self.times[i],
            y=self.y[i],
            x=self.x[i] if self.x is not None else None,
            x_e=float(self.x_e[i]) if self.x_e is not None else None,
            x_g=self.x_g[i] if self.x_g is not None else None,
        )


def _fmt(value: float) -> str:
    if not np.isfinite(value):
        return ""
    return format(value, ".17g")


def _wide_header(n_waves: int, has_x: bool, has_xe: bool, n_xg: int, has_label: bool) -> list[str]:
    cols = ["id"]
    cols += [f"t_{j + 1}" for j in range(n_waves)]
    cols += [f"y_{j + 1}" for j in range(n_waves)]
    if has_x:
        cols += [f"x_{j + 1}" for j in range(n_waves)]
    if has_xe:
        cols.append("xe")
    cols += [f"xg{i + 1}" for i in range(n_xg)]
    if has_label:
        cols.append("label")
    return cols


def write_dataset(dataset: LongitudinalDataset, path) -> None:
    """Write the wide CSV with canonical 17-significant-digit floats."""
    J = dataset.n_waves
    n_xg = dataset.x_g.shape[1] if dataset.x_g is not None else 0
    header = _wide_header(J, dataset.x is not None, dataset.x_e is not None,
                          n_xg, dataset.labels is not None)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row = [dataset.ids[i]]
            row += [_fmt(v) for v in dataset.times[i]]
            row += [_fmt(v) for v in dataset.y[i]]
            if dataset.x is not None:
                row += [_fmt(v) for v in dataset.x[i]]
            if dataset.x_e is not None:
                row.append(_fmt(dataset.x_e[i]))
            if dataset.x_g is not None:
                row += [_fmt(v) for v in dataset.x_g[i]]
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            writer.writerow(row)


def _parse_cell(text: str, row_num: int, col: str, allow_missing: bool) -> float:
    text = text.strip()
    if text == "":
        if allow_missing:
            return np.nan
        raise ValueError(f"row {row_num}: column {col} may not be empty")
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"row {row_num}: non-numeric value {text!r} in column {col}") from None


def read_dataset(path, format: str = "wide") -> LongitudinalDataset:
    """Parse a dataset file; ``format`` is ``wide`` or ``long``."""
    if format == "long":
        return _read_long(path)
    if format != "wide":
        raise ValueError(f"unknown dataset format {format!r}")
    with open(path, newline="") as fh:
        return _read_wide(fh)


def _read_wide(fh) -> LongitudinalDataset:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty dataset file") from None
    header = [h.strip() for h in header]
    if not header or header[0] != "id":
        raise ValueError("malformed header: first column must be 'id'")
    n_waves = sum(1 for h in header if h.startswith("t_"))
    if n_waves == 0:
        raise ValueError("malformed header: no t_j columns")
    has_x = any(h.startswith("x_") for h in header)
    has_xe = "xe" in header
    n_xg = sum(1 for h in header if h.startswith("xg"))
    has_label = "label" in header
    expected = _wide_header(n_waves, has_x, has_xe, n_xg, has_label)
    if header != expected:
        raise ValueError(f"malformed header: expected {expected}, got {header}")

    ids, rows_t, rows_y, rows_x, xe, xg, labels = [], [], [], [], [], [], []
    for row_num, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"row {row_num}: expected {len(header)} cells, got {len(row)}")
        pos = 0
        ids.append(row[pos].strip())
        pos += 1
        t = [_parse_cell(row[pos + j], row_num, f"t_{j + 1}", False) for j in range(n_waves)]
        pos += n_waves
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"row {row_num}: times must be strictly increasing")
        y = [_parse_cell(row[pos + j], row_num, f"y_{j + 1}", True) for j in range(n_waves)]
        pos += n_waves
        if has_x:
            x = [_parse_cell(row[pos + j], row_num, f"x_{j + 1}", True) for j in range(n_waves)]
            pos += n_waves
            rows_x.append(x)
        if has_xe:
            xe.append(_parse_cell(row[pos], row_num, "xe", False))
            pos += 1
        if n_xg:
            xg.append([_parse_cell(row[pos + i], row_num, f"xg{i + 1}", False) for i in range(n_xg)])
            pos += n_xg
        if has_label:
            labels.append(int(_parse_cell(row[pos], row_num, "label", False)))
        rows_t.append(t)
        rows_y.append(y)
    if not rows_t:
        raise ValueError("dataset has no rows")
    return LongitudinalDataset(
        times=np.asarray(rows_t),
        y=np.asarray(rows_y),
        x=np.asarray(rows_x) if has_x else None,
        x_e=np.asarray(xe) if has_xe else None,
        x_g=np.asarray(xg) if n_xg else None,
        ids=ids,
        labels=np.asarray(labels) if has_label else None,
    )


def _read_long(path) -> LongitudinalDataset:
    """Long format: id, wave, t, y[, x] plus per-individual xe, xg1.. columns."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames:
            raise ValueError("malformed long header: need an 'id' column")
        for col in ("wave", "t", "y"):
            if col not in reader.fieldnames:
                raise ValueError(f"malformed long header: missing column {col!r}")
        has_x = "x" in reader.fieldnames
        xg_cols = sorted(c for c in reader.fieldnames if c.startswith("xg"))
        has_xe = "xe" in reader.fieldnames
        has_label = "label" in reader.fieldnames
        per_id: dict[str, dict] = {}
        for row_num, row in enumerate(reader, start=2):
            key = row["id"].strip()
            entry = per_id.setdefault(key, {"waves": {}, "xe": None, "xg": None, "label": None})
            wave = int(_parse_cell(row["wave"], row_num, "wave", False))
            t = _parse_cell(row["t"], row_num, "t", False)
            y = _parse_cell(row["y"], row_num, "y", True)
            x = _parse_cell(row["x"], row_num, "x", True) if has_x else None
            entry["waves"][wave] = (t, y, x)
            if has_xe:
                entry["xe"] = _parse_cell(row["xe"], row_num, "xe", False)
            if xg_cols:
                entry["xg"] = [_parse_cell(row[c], row_num, c, False) for c in xg_cols]
            if has_label:
                entry["label"] = int(_parse_cell(row["label"], row_num, "label", False))
    if not per_id:
        raise ValueError("dataset has no rows")
    waves = sorted({w for e in per_id.values() for w in e["waves"]})
    ids = list(per_id)
    n = len(ids)
    J = len(waves)
    times = np.full((n, J), np.nan)
    y = np.full((n, J), np.nan)
    x = np.full((n, J), np.nan) if has_x else None
    for i, key in enumerate(ids):
        for j, w in enumerate(waves):
            if w in per_id[key]["waves"]:
                t_v, y_v, x_v = per_id[key]["waves"][w]
                times[i, j] = t_v
                y[i, j] = y_v
                if has_x:
                    x[i, j] = x_v
    return LongitudinalDataset(
        times=times,
        y=y,
        x=x,
        x_e=np.array([per_id[k]["xe"] for k in ids]) if has_xe else None,
        x_g=np.array([per_id[k]["xg"] for k in ids]) if xg_cols else None,
        ids=ids,
        labels=np.array([per_id[k]["label"] for k in ids]) if has_label else None,
    )


def dataset_to_csv_text(dataset: LongitudinalDataset) -> str:
    buf = io.StringIO()
    J = dataset.n_waves
    n_xg = dataset.x_g.shape[1] if dataset.x_g is not None else 0
    header = _wide_header(J, dataset.x is not None, dataset.x_e is not None,
                          n_xg, dataset.labels is not None)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for i in range(dataset.n):
        row = [dataset.ids[i]]
        row += [_fmt(v) for v in dataset.times[i]]
        row += [_fmt(v) for v in dataset.y[i]]
        if dataset.x is not None:
            row += [_fmt(v) for v in dataset.x[i]]
        if dataset.x_e is not None:
            row.append(_fmt(dataset.x_e[i]))
        if dataset.x_g is not None:
            row += [_fmt(v) for v in dataset.x_g[i]]
        if dataset.labels is not None:
            row.append(str(int(dataset.labels[i])))
        writer.writerow(row)
    return buf.getvalue()


@dataclass(frozen=True)
class TvcStandardization:
    """Baseline mean/sd used to standardize the TVC; invertible."""

    mean: float
    sd: float

    def inverse(self, standardized: np.ndarray) -> np.ndarray:
        return np.asarray(standardized) * self.sd + self.mean


def standardize_tvc(dataset: LongitudinalDataset):
    """Standardize x at every wave by the baseline mean and SD.

    Returns the transformed dataset and the transform, so estimates can be
    mapped back to the original TVC scale.
    """
    if dataset.x is None:
        raise ValueError("dataset has no TVC block to standardize")
    baseline = dataset.x[:, 0]
    baseline = baseline[np.isfinite(baseline)]
    if baseline.size == 0:
        raise ValueError("no observed baseline TVC values")
    mean = float(baseline.mean())
    sd = float(baseline.std(ddof=1))
    if not sd > 0:
        raise ValueError("baseline TVC standard deviation is zero")
    out = LongitudinalDataset(
        times=dataset.times.copy(),
        y=dataset.y.copy(),
        x=(dataset.x - mean) / sd,
        x_e=None if dataset.x_e is None else dataset.x_e.copy(),
        x_g=None if dataset.x_g is None else dataset.x_g.copy(),
        ids=list(dataset.ids),
        labels=None if dataset.labels is None else dataset.labels.copy(),
        true_theta=dataset.true_theta,
    )
    return out, TvcStandardization(mean, sd)
