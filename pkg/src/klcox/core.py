"""Right-censored survival data, risk sets and dataset I/O.

Ties among event times use the Breslow convention everywhere in the package:
the ``d_k`` events at ``t_k`` share one risk-set denominator. A subject
censored at ``t_k`` stays in the risk set of ``t_k``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class DataError(ValueError):
    """Invalid survival data. ``row`` is 1-based over data rows (header excluded)."""

    def __init__(self, message, row=None, column=None, source=None):
        self.message = message
        self.row = row
        self.column = column
        self.source = source
        where = []
        if source is not None:
            where.append(str(source))
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class NoEventsError(DataError):
    pass


@dataclass(frozen=True)
class SurvivalRecord:
    id: str
    time: float
    status: int
    covariates: np.ndarray


class SurvivalDataset:
    """Immutable set of ``(X_i, delta_i, Z_i)`` records.

    Parameters
    ----------
    time : array of positive finite observed times.
    status : array of 0/1 event indicators.
    covariates : ``(n, p)`` array of finite covariates.
    ids : optional record identifiers (default ``"1".."n"``).
    """

    def __init__(self, time, status, covariates, ids=None):
        time = np.array(time, dtype=float)
        status_in = np.asarray(status)
        z = np.array(covariates, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        n = time.shape[0]
        if time.ndim != 1 or status_in.shape != (n,) or z.ndim != 2 or z.shape[0] != n:
            raise DataError("time, status and covariates must have matching lengths")
        if n == 0:
            raise NoEventsError("no events")
        for i in range(n):
            if not math.isfinite(time[i]) or time[i] <= 0:
                raise DataError(f"time must be positive and finite, got {time[i]!r}",
                                row=i + 1, column="time")
        bad = ~np.isin(status_in, (0, 1))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"status must be 0 or 1, got {status_in[i]!r}", row=i + 1,
                            column="status")
        if not np.all(np.isfinite(z)):
            i, j = np.argwhere(~np.isfinite(z))[0]
            raise DataError("non-finite covariate", row=int(i) + 1, column=f"z{j + 1}")
        status_arr = status_in.astype(np.int64)
        if status_arr.sum() == 0:
            raise NoEventsError("no events")
        if ids is None:
            ids = [str(i + 1) for i in range(n)]
        ids = tuple(str(v) for v in ids)
        if len(ids) != n:
            raise DataError("ids length does not match records")
        for arr in (time, status_arr, z):
            arr.flags.writeable = False
        self.time = time
        self.status = status_arr
        self.covariates = z
        self.ids = ids

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"SurvivalDataset(n={self.n}, p={self.p}, events={int(self.status.sum())})"

    @property
    def records(self) -> list[SurvivalRecord]:
        return [SurvivalRecord(self.ids[i], float(self.time[i]), int(self.status[i]),
                               self.covariates[i]) for i in range(self.n)]

    @cached_property
    def order(self) -> np.ndarray:
        """Record indices sorted by descending time (stable on record index)."""
        return np.lexsort((np.arange(self.n), -self.time))

    @cached_property
    def _events(self):
        return np.unique(self.time[self.status == 1], return_counts=True)

    @property
    def event_times(self) -> np.ndarray:
        return self._events[0]

    @property
    def event_counts(self) -> np.ndarray:
        """``d_k``: number of events at each ``event_times[k]``."""
        return self._events[1]

    @cached_property
    def event_index(self) -> tuple:
        """For each event time, indices of records failing at it."""
        return tuple(np.flatnonzero((self.time == t) & (self.status == 1))
                     for t in self.event_times)

    @cached_property
    def risk_end(self) -> np.ndarray:
        """Risk-set sizes, ordered from the last event time to the first.

        ``order[:risk_end[k]]`` is the risk set of ``event_times[::-1][k]``.
        """
        sorted_time = self.time[self.order]
        # number of records with time >= t, for t descending
        return np.searchsorted(-sorted_time, -self.event_times[::-1], side="right")

    @property
    def risk_index(self) -> list:
        """For each event time (ascending), indices ``{i : X_i >= t_k}``."""
        ends = self.risk_end[::-1]
        return [np.sort(self.order[:e]) for e in ends]

    def risk_set(self, t: float) -> np.ndarray:
        return np.flatnonzero(self.time >= t)

    def subset(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return SurvivalDataset(self.time[idx], self.status[idx], self.covariates[idx],
                               [self.ids[i] for i in idx])

    def with_covariates(self, covariates) -> "SurvivalDataset":
        return SurvivalDataset(self.time, self.status, covariates, self.ids)

    def sorted_view(self):
        """``(x, risk_end, d)`` in descending-time row order for the kernels."""
        return (np.ascontiguousarray(self.covariates[self.order]), self.risk_end,
                self.event_counts[::-1].astype(float))


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function; ``initial`` applies before ``times[0]``."""

    times: np.ndarray
    values: np.ndarray
    initial: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape or t.ndim != 1:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.times.size == 0:
            out = np.full(t.shape, self.initial)
            return out if out.ndim else float(out)
        pos = np.searchsorted(self.times, t, side="right") - 1
        out = np.where(pos >= 0, self.values[np.maximum(pos, 0)], self.initial)
        return out if out.ndim else float(out)

    def to_csv(self, dest) -> None:
        w = csv.writer(dest, lineterminator="\n")
        w.writerow(["t", "value"])
        for t, v in zip(self.times, self.values):
            w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, source, initial=0.0) -> "StepFunction":
        rows = list(csv.DictReader(source))
        return cls(np.array([float(r["t"]) for r in rows]),
                   np.array([float(r["value"]) for r in rows]), initial)


def breslow_baseline(dataset: SurvivalDataset, beta) -> StepFunction:
    """Breslow cumulative baseline hazard at coefficients ``beta``."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dataset.p,):
        raise ValueError(f"beta must have length {dataset.p}")
    lp = dataset.covariates @ beta
    lp_sorted = lp[dataset.order]
    shift = lp_sorted.max()
    s0 = np.cumsum(np.exp(lp_sorted - shift))[dataset.risk_end - 1]
    jumps = dataset.event_counts[::-1] / s0 * np.exp(-shift)
    return StepFunction(dataset.event_times, np.cumsum(jumps[::-1]), 0.0)


def risk_set(dataset: SurvivalDataset, t: float) -> np.ndarray:
    return dataset.risk_set(t)


def _parse_float(text, row, column, source):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"cannot parse {text!r} as a number", row=row, column=column,
                        source=source) from None


def load_dataset(source, schema: dict | None = None, name=None) -> SurvivalDataset:
    """Read a dataset from CSV text (path, file object, or string buffer).

    ``schema`` maps ``id``, ``time``, ``status`` to column names and
    ``covariates`` to a list of columns; by default the canonical header
    ``id,time,status,z1,...,zp`` is assumed and all columns after ``status``
    are covariates.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        name = name or str(source)
        with open(source, newline="", encoding="utf-8") as fh:
            return load_dataset(fh, schema, name)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty file", source=name) from None
    schema = dict(schema or {})
    id_col = schema.get("id", "id" if "id" in header else None)
    time_col = schema.get("time", "time")
    status_col = schema.get("status", "status")
    for col in (time_col, status_col):
        if col not in header:
            raise DataError(f"missing column {col!r}", source=name)
    cov_cols = schema.get("covariates")
    if cov_cols is None:
        cov_cols = header[header.index(status_col) + 1:]
    missing = [c for c in cov_cols if c not in header]
    if missing:
        raise DataError(f"missing covariate columns {missing}", source=name)
    pos = {c: header.index(c) for c in [time_col, status_col, *cov_cols]}
    id_pos = header.index(id_col) if id_col is not None else None

    ids, times, status, z = [], [], [], []
    for r, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"expected {len(header)} fields, got {len(row)}", row=r,
                            source=name)
        ids.append(row[id_pos].strip() if id_pos is not None else str(r))
        times.append(_parse_float(row[pos[time_col]], r, time_col, name))
        s = row[pos[status_col]].strip()
        if s not in ("0", "1"):
            raise DataError(f"status must be 0 or 1, got {s!r}", row=r, column=status_col,
                            source=name)
        status.append(int(s))
        z.append([_parse_float(row[pos[c]], r, c, name) for c in cov_cols])
    if not times:
        raise NoEventsError("no events", source=name)
    try:
        return SurvivalDataset(times, status, np.array(z, dtype=float).reshape(len(times), -1),
                               ids)
    except DataError as exc:
        if exc.source is None and name is not None:
            raise type(exc)(exc.message, row=exc.row, column=exc.column, source=name) from None
        raise


def write_dataset(dataset: SurvivalDataset, dest) -> None:
    """Write the canonical CSV form (shortest round-trip float repr)."""
    if isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__"):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            return write_dataset(dataset, fh)
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["id", "time", "status", *[f"z{j + 1}" for j in range(dataset.p)]])
    for i in range(dataset.n):
        w.writerow([dataset.ids[i], repr(float(dataset.time[i])), int(dataset.status[i]),
                    *[repr(float(v)) for v in dataset.covariates[i]]])


def dataset_to_string(dataset: SurvivalDataset) -> str:
    buf = io.StringIO()
    write_dataset(dataset, buf)
    return buf.getvalue()
