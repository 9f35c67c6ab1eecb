"""Domain types shared by every stage, plus their CSV serialization.

Timestamps live in memory as int64 epoch seconds (UTC) and on disk as
ISO-8601 strings with a ``Z`` suffix. All numeric payloads are float64.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArityError, ConfigurationError, EmptyResultError, OrderingError, SchemaError

log = logging.getLogger(__name__)

HOUR = 3600
DEFAULT_START = 1704067200  # 2024-01-01T00:00:00Z


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def parse_timestamp(text: str) -> int:
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def hourly_timestamps(n: int, start: int = DEFAULT_START) -> np.ndarray:
    return start + HOUR * np.arange(n, dtype=np.int64)


def _check_timestamps(ts: np.ndarray, regular: bool) -> None:
    if ts.ndim != 1:
        raise ArityError("timestamps must be one-dimensional")
    steps = np.diff(ts)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 1
        raise OrderingError(f"timestamps not strictly increasing at index {bad}")
    if regular and steps.size and np.any(steps != steps[0]):
        raise OrderingError("timestamps declared regular but spacing varies")


@dataclass(frozen=True, eq=False)
class ObservationSeries:
    timestamps: np.ndarray
    values: np.ndarray
    missing_mask: np.ndarray = None
    regular: bool = False

    def __post_init__(self):
        ts = _frozen(self.timestamps, np.int64)
        vals = _frozen(self.values, np.float64)
        if vals.ndim != 1 or vals.shape != ts.shape:
            raise ArityError(f"values shape {vals.shape} does not match timestamps {ts.shape}")
        _check_timestamps(ts, self.regular)
        mask = ~np.isfinite(vals) if self.missing_mask is None else np.asarray(self.missing_mask, bool)
        if mask.shape != vals.shape:
            raise ArityError("missing_mask length differs from values")
        if np.any(~np.isfinite(vals[~mask])):
            raise SchemaError("non-finite observation not flagged as missing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "missing_mask", _frozen(mask, bool))

    def __len__(self):
        return self.values.shape[0]

    @classmethod
    def hourly(cls, values, start: int = DEFAULT_START) -> "ObservationSeries":
        values = np.asarray(values, dtype=np.float64)
        return cls(hourly_timestamps(values.shape[0], start), values, regular=True)

    def take(self, idx) -> "ObservationSeries":
        return ObservationSeries(self.timestamps[idx], self.values[idx], self.missing_mask[idx])


@dataclass(frozen=True, eq=False)
class EnsembleMatrix:
    """T x M scenario matrix aligned to a timestamp vector.

    ``missing_mask`` is row-level: a row with any non-finite member is
    unusable as a regression basis row and is flagged as a whole.
    """

    values: np.ndarray
    timestamps: np.ndarray
    member_labels: tuple = None
    missing_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        vals = _frozen(self.values, np.float64)
        if vals.ndim != 2:
            raise ArityError("ensemble values must be a T x M matrix")
        ts = _frozen(self.timestamps, np.int64)
        if ts.shape != (vals.shape[0],):
            raise ArityError(f"ensemble has {vals.shape[0]} rows but {ts.shape[0]} timestamps")
        if vals.shape[1] < 1:
            raise ArityError("ensemble needs at least one member")
        _check_timestamps(ts, False)
        labels = self.member_labels
        if labels is None:
            labels = tuple(f"ens_{j}" for j in range(vals.shape[1]))
        labels = tuple(str(s) for s in labels)
        if len(labels) != vals.shape[1]:
            raise ArityError("member_labels length differs from member count")
        row_missing = ~np.all(np.isfinite(vals), axis=1)
        mask = row_missing if self.missing_mask is None else np.asarray(self.missing_mask, bool)
        if np.any(row_missing & ~mask):
            raise SchemaError("non-finite ensemble entry not flagged as missing")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "member_labels", labels)
        object.__setattr__(self, "missing_mask", _frozen(mask, bool))

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_members(self) -> int:
        return self.values.shape[1]

    def take(self, idx) -> "EnsembleMatrix":
        return EnsembleMatrix(self.values[idx], self.timestamps[idx], self.member_labels, self.missing_mask[idx])


@dataclass(frozen=True)
class QuantileLevels:
    taus: tuple

    def __post_init__(self):
        taus = tuple(float(t) for t in np.atleast_1d(np.asarray(self.taus, dtype=np.float64)))
        if not taus:
            raise ConfigurationError("at least one quantile level is required")
        for t in taus:
            if not 0.0 < t < 1.0:
                raise ConfigurationError(f"quantile level {t} outside (0, 1)")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ConfigurationError(f"quantile levels must be strictly increasing without duplicates: {taus}")
        object.__setattr__(self, "taus", taus)

    def __len__(self):
        return len(self.taus)

    def __iter__(self):
        return iter(self.taus)

    def __getitem__(self, i):
        return self.taus[i]

    @property
    def array(self) -> np.ndarray:
        return np.array(self.taus)

    def index_of(self, tau: float) -> int:
        for i, t in enumerate(self.taus):
            if abs(t - tau) < 1e-12:
                return i
        raise ConfigurationError(f"quantile level {tau} not present in {self.taus}")

    def labels(self, precision: int = 2) -> list[str]:
        out = [f"q_{t:.{precision}f}" for t in self.taus]
        if len(set(out)) != len(out):
            raise ConfigurationError(f"tau precision {precision} renders duplicate column names")
        return out

    @classmethod
    def grid(cls, lo=0.05, hi=0.95, step=0.05) -> "QuantileLevels":
        n = int(round((hi - lo) / step)) + 1
        return cls(tuple(round(lo + i * step, 10) for i in range(n)))


@dataclass(frozen=True, eq=False)
class QuantileForecastMatrix:
    values: np.ndarray
    taus: QuantileLevels
    timestamps: np.ndarray

    def __post_init__(self):
        taus = self.taus if isinstance(self.taus, QuantileLevels) else QuantileLevels(self.taus)
        vals = _frozen(self.values, np.float64)
        if vals.ndim == 1:
            vals = _frozen(vals.reshape(-1, 1), np.float64)
        if vals.ndim != 2 or vals.shape[1] != len(taus):
            raise ArityError(f"forecast matrix shape {vals.shape} does not match {len(taus)} quantile levels")
        ts = _frozen(self.timestamps, np.int64)
        if ts.shape != (vals.shape[0],):
            raise ArityError("forecast timestamps do not match row count")
        _check_timestamps(ts, False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.values.shape[0]

    def column(self, tau: float) -> np.ndarray:
        return self.values[:, self.taus.index_of(tau)]

    @property
    def missing_mask(self) -> np.ndarray:
        return ~np.all(np.isfinite(self.values), axis=1)

    def take(self, idx) -> "QuantileForecastMatrix":
        return QuantileForecastMatrix(self.values[idx], self.taus, self.timestamps[idx])

    def crossing_count(self) -> int:
        return int(np.sum(np.diff(self.values, axis=1) < 0))


# --------------------------------------------------------------------- CSV io

@dataclass(frozen=True)
class DatasetSchema:
    timestamp: str = "timestamp"
    target: str = "y"
    members: Sequence[str] | None = None  # None: every other column


def _parse_cell(text: str) -> float:
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return math.nan
    return float(text)


def load_dataset(path, schema: DatasetSchema | None = None) -> tuple[EnsembleMatrix, ObservationSeries]:
    schema = schema or DatasetSchema()
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = list(reader)

    for name in (schema.timestamp, schema.target):
        if name not in header:
            raise SchemaError(f"{path}: missing column '{name}'")
    members = list(schema.members) if schema.members is not None else [
        h for h in header if h not in (schema.timestamp, schema.target)
    ]
    absent = [m for m in members if m not in header]
    if absent:
        raise SchemaError(f"{path}: missing column(s) {', '.join(absent)}")
    if len(members) < 2:
        raise ArityError(f"{path}: need at least 2 ensemble columns, found {len(members)}")

    i_ts, i_y = header.index(schema.timestamp), header.index(schema.target)
    i_m = [header.index(m) for m in members]
    ts, y, ens, bad_ts, bad_num = [], [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
        try:
            ts.append(parse_timestamp(row[i_ts]))
        except ValueError:
            bad_ts.append(lineno)
            continue
        try:
            y.append(_parse_cell(row[i_y]))
            ens.append([_parse_cell(row[j]) for j in i_m])
        except ValueError:
            bad_num.append(lineno)
    if bad_ts:
        raise SchemaError(f"{path}: unparseable timestamp on line(s) {bad_ts}")
    if bad_num:
        raise SchemaError(f"{path}: unparseable number on line(s) {bad_num}")
    if not ts:
        raise EmptyResultError(f"{path}: no data rows")

    ts = np.array(ts, dtype=np.int64)
    obs = ObservationSeries(ts, np.array(y, dtype=np.float64))
    matrix = EnsembleMatrix(np.array(ens, dtype=np.float64).reshape(len(ts), len(members)), ts, tuple(members))
    return matrix, obs


def _fmt(v: float) -> str:
    return "NaN" if not math.isfinite(v) else repr(float(v))


def save_dataset(path, ens: EnsembleMatrix, obs: ObservationSeries) -> Path:
    if not np.array_equal(ens.timestamps, obs.timestamps):
        raise ArityError("ensemble and observation timestamps differ")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "y", *ens.member_labels])
        for i in range(len(obs)):
            yv = math.nan if obs.missing_mask[i] else obs.values[i]
            w.writerow([format_timestamp(obs.timestamps[i]), _fmt(yv), *(_fmt(v) for v in ens.values[i])])
    return path


def write_quantile_csv(path, qf: QuantileForecastMatrix, precision: int = 2) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *qf.taus.labels(precision)])
        for t, row in zip(qf.timestamps, qf.values):
            w.writerow([format_timestamp(t), *(_fmt(v) for v in row)])
    return path


def read_quantile_csv(path) -> QuantileForecastMatrix:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if header[0] != "timestamp" or not all(h.startswith("q_") for h in header[1:]):
        raise SchemaError(f"{path}: expected header timestamp,q_<tau>,...")
    taus = QuantileLevels(tuple(float(h[2:]) for h in header[1:]))
    ts = np.array([parse_timestamp(r[0]) for r in rows], dtype=np.int64)
    vals = np.array([[_parse_cell(c) for c in r[1:]] for r in rows], dtype=np.float64).reshape(len(rows), len(taus))
    return QuantileForecastMatrix(vals, taus, ts)


def clean_nans(obs: ObservationSeries, qf: QuantileForecastMatrix):
    """Drop rows missing on either side.

    Returns ``(obs, qf, n_dropped)``.
    """
    if not np.array_equal(obs.timestamps, qf.timestamps):
        raise ArityError("observation and forecast timestamps differ")
    keep = ~(obs.missing_mask | qf.missing_mask)
    if not keep.any():
        raise EmptyResultError("every row has a missing value; nothing left to score")
    dropped = int((~keep).sum())
    if dropped == 0:
        return obs, qf, 0
    log.info("clean_nans dropped %d of %d rows", dropped, len(obs))
    return obs.take(keep), qf.take(keep), dropped
