"""Harrell's C-index, Kaplan-Meier curves and percentile risk groups."""

from __future__ import annotations

import csv
import logging

import numpy as np
from scipy.stats import rankdata

from . import kernels
from .core import StepFunction

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def _check(times, statuses, scores=None):
    times = np.asarray(times, dtype=float)
    statuses = np.asarray(statuses)
    if times.ndim != 1 or statuses.shape != times.shape:
        raise ValueError("times and statuses must be 1-d arrays of equal length")
    if not np.all(np.isin(statuses, (0, 1))):
        raise ValueError("statuses must be 0 or 1")
    if scores is not None:
        scores = np.asarray(scores, dtype=float)
        if scores.shape != times.shape:
            raise ValueError("risk_scores must match times in length")
        if not np.all(np.isfinite(scores)):
            raise ValueError("risk_scores must be finite")
    return times, statuses.astype(np.int64), scores


def concordance(times, statuses, risk_scores) -> tuple[int, int]:
    """``(2 * concordant + tied, usable)`` over usable pairs, as exact integers.

    A pair is usable when the shorter observed time is an event and the other
    time is strictly longer.
    """
    t, s, r = _check(times, statuses, risk_scores)
    return kernels.concordance_counts(t, s, r)


def c_index(times, statuses, risk_scores) -> float:
    """Harrell's C: higher score should mean earlier event; score ties count 1/2."""
    num, usable = concordance(times, statuses, risk_scores)
    if usable == 0:
        raise UndefinedMetricError("no usable pairs for the C-index")
    return num / (2.0 * usable)


def kaplan_meier(times, statuses) -> StepFunction:
    """Product-limit survival; censorings at an event time stay in its risk set."""
    t, s, _ = _check(times, statuses)
    if t.size == 0:
        raise ValueError("need at least one record")
    ev_times, d = np.unique(t[s == 1], return_counts=True)
    at_risk = t.size - np.searchsorted(np.sort(t), ev_times, side="left")
    return StepFunction(ev_times, np.cumprod(1.0 - d / at_risk), 1.0)


def percentiles(risk_scores) -> np.ndarray:
    """``100 * average rank / n``; the highest score gets 100."""
    r = np.asarray(risk_scores, dtype=float)
    return 100.0 * rankdata(r, method="average") / r.size


def risk_stratify(risk_scores, cutpoints, times, statuses):
    """Split subjects at score percentiles and fit a KM curve per group.

    ``cutpoints`` ``(20, 80)`` gives groups 0-20%, 21-80%, 81-100%. Returns
    ``(curves, labels)`` with curves in ascending-risk order and
    ``labels[i]`` the group of subject ``i``. An empty group is merged into
    the next higher one.
    """
    t, s, r = _check(times, statuses, risk_scores)
    cuts = np.asarray(cutpoints, dtype=float)
    if cuts.ndim != 1 or np.any(np.diff(cuts) <= 0) or np.any((cuts <= 0) | (cuts >= 100)):
        raise ValueError("cutpoints must be strictly increasing within (0, 100)")
    pct = percentiles(r)
    raw = (pct[:, None] > cuts[None, :]).sum(axis=1)
    present = np.unique(raw)
    if present.size < cuts.size + 1:
        log.warning("%d empty risk group(s) merged upward", cuts.size + 1 - present.size)
    # an empty group vanishes, so its would-be members fall in the next occupied one
    labels = np.searchsorted(present, raw)
    curves = [kaplan_meier(t[labels == g], s[labels == g]) for g in range(present.size)]
    return curves, labels


def write_km_csv(curves, dest, names=None) -> None:
    """Write curves as ``group,t,survival`` rows."""
    names = list(range(len(curves))) if names is None else list(names)
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["group", "t", "survival"])
    for name, c in zip(names, curves):
        for t, v in zip(c.times, c.values):
            w.writerow([name, repr(float(t)), repr(float(v))])
