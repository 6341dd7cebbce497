"""
Post-processing of relative-error traces: peaks, decay rates and stagnation.

DR relative errors oscillate, so decay is measured on the local maxima of
the series rather than on the raw values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PeakSeries",
    "classify_series",
    "classify_stagnation",
    "decade_rate",
    "detect_peaks",
    "error_ratio",
    "mean_spacing",
]

TRANSIENT = 0.1
MIN_DECADES = 0.2
STUCK_DROP = 0.05
STUCK_WINDOW = 10
IRREGULAR_CV = 0.5


@dataclass(frozen=True, eq=False)
class PeakSeries:
    iterations: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.iterations.shape != self.values.shape:
            raise ValueError("iterations and values must have the same length")
        if np.any(np.diff(self.iterations) <= 0):
            raise ValueError("peak iterations must be strictly increasing")

    @classmethod
    def empty(cls) -> "PeakSeries":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    def __len__(self):
        return int(self.values.size)

    def tail(self, count: int) -> "PeakSeries":
        return PeakSeries(self.iterations[-count:], self.values[-count:])


def _series(trace_or_values, iterations=None):
    rel = getattr(trace_or_values, "rel_err", None)
    if rel is not None:
        values = np.asarray(rel, dtype=float)
        its = np.arange(1, values.size + 1) if iterations is None else np.asarray(iterations)
    else:
        values = np.asarray(trace_or_values, dtype=float)
        its = np.arange(values.size) if iterations is None else np.asarray(iterations)
    if values.shape != its.shape:
        raise ValueError("iterations must match the series length")
    return values, its


def detect_peaks(trace_or_values, iterations=None, transient: float = TRANSIENT) -> PeakSeries:
    """Local maxima of a series, skipping the first ``transient`` fraction.

    Parameters
    ----------
    trace_or_values : SolveTrace or array_like
        A trace (its ``rel_err`` is used, iterations numbered from 1) or a raw
        series (numbered from 0).
    iterations : array_like, optional
        Explicit iteration numbers for the series.
    transient : float
        Fraction of the series, counted from the start, in which peaks are
        ignored.

    Notes
    -----
    A peak is a strict rise followed, possibly after a flat top, by a strict
    fall; it is reported at the first index of the flat top. Endpoints are
    never peaks.
    """
    values, its = _series(trace_or_values, iterations)
    if values.size < 3:
        raise ValueError("need at least 3 points to detect peaks")
    start = max(1, int(transient * values.size))
    idx = []
    i = start
    n = values.size
    while i < n - 1:
        if values[i] > values[i - 1]:
            j = i
            while j < n - 1 and values[j + 1] == values[i]:
                j += 1
            if j < n - 1 and values[j + 1] < values[i]:
                idx.append(i)
            i = j + 1
        else:
            i += 1
    idx = np.array(idx, dtype=np.int64)
    return PeakSeries(its[idx].astype(np.int64), values[idx])


def decade_rate(peaks: PeakSeries) -> float:
    """Iterates per decade of decay, from a least-squares fit of log10(peak).

    Returns NaN when there are fewer than two positive peaks or they span
    less than 0.2 decades. A growing series gives a negative rate.
    """
    keep = peaks.values > 0
    if keep.sum() < 2:
        return math.nan
    logs = np.log10(peaks.values[keep])
    if logs.max() - logs.min() < MIN_DECADES:
        return math.nan
    slope = np.polyfit(peaks.iterations[keep].astype(float), logs, 1)[0]
    if slope == 0:
        return math.nan
    return -1.0 / slope


def mean_spacing(peaks: PeakSeries) -> float:
    """Mean distance in iterates between successive peaks (NaN with < 2 peaks)."""
    if len(peaks) < 2:
        return math.nan
    return float(np.mean(np.diff(peaks.iterations)))


def classify_stagnation(peaks: PeakSeries, window: int = STUCK_WINDOW) -> str:
    """``"stuck"``, ``"decaying"`` or ``"irregular"`` from the last ``window`` peaks.

    Stuck when the best drop of log10(peak) below the first peak of the
    window is under 0.05 decades. Decaying when the fitted rate over the
    window is defined and positive. Anything else is irregular.
    """
    if len(peaks) < STUCK_WINDOW:
        raise ValueError(f"need at least {STUCK_WINDOW} peaks")
    recent = peaks.tail(max(STUCK_WINDOW, window))
    pos = recent.values[recent.values > 0]
    if pos.size < 2:
        return "stuck"
    logs = np.log10(pos)
    if logs[0] - logs[1:].min() < STUCK_DROP:
        return "stuck"
    rate = decade_rate(recent)
    if math.isfinite(rate) and rate > 0:
        return "decaying"
    return "irregular"


def spacing_cv(peaks: PeakSeries) -> float:
    """Coefficient of variation of the peak spacing (NaN with < 3 peaks)."""
    if len(peaks) < 3:
        return math.nan
    gaps = np.diff(peaks.iterations).astype(float)
    return float(gaps.std() / gaps.mean())


def classify_series(values, tail: float = 0.2) -> str:
    """Stagnation test for a series without oscillations (AP relative errors).

    Uses the last ``tail`` fraction: decaying if log10 of the series drops by
    at least 0.05 decades across it, stuck otherwise.
    """
    v = np.asarray(values, dtype=float)
    v = v[int((1 - tail) * v.size):]
    v = v[v > 0]
    if v.size < 2:
        return "stuck"
    logs = np.log10(v)
    return "decaying" if logs[0] - logs[1:].min() >= STUCK_DROP else "stuck"


def error_ratio(err, rel_err, transient: float = TRANSIENT) -> float:
    """Median ratio of error to relative error.

    Each peak of ``err`` is divided by the latest ``rel_err`` peak at or
    before it. Series without at least two peaks each (monotone decay, as in
    averaged projections) fall back to the pointwise ratio after the
    transient.
    """
    err = np.asarray(err, dtype=float)
    rel_err = np.asarray(rel_err, dtype=float)
    if err.shape != rel_err.shape:
        raise ValueError("err and rel_err must have the same length")
    if err.size < 3:
        return math.nan
    pe = detect_peaks(err, transient=transient)
    pr = detect_peaks(rel_err, transient=transient)
    if len(pe) >= 2 and len(pr) >= 2:
        ratios = []
        for it, val in zip(pe.iterations, pe.values):
            k = np.searchsorted(pr.iterations, it, side="right") - 1
            if k >= 0 and pr.values[k] > 0:
                ratios.append(val / pr.values[k])
        if ratios:
            return float(np.median(ratios))
    start = int(transient * err.size)
    e, r = err[start:], rel_err[start:]
    ok = r > 0
    if not ok.any():
        return math.nan
    return float(np.median(e[ok] / r[ok]))
