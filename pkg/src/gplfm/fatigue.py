"""Fatigue and accuracy metrics for estimated response histories."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CycleSet:
    """Counted cycles as parallel arrays of range, mean and count (0.5 or 1)."""

    ranges: np.ndarray
    means: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        for name in ("ranges", "means", "counts"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.ranges < 0):
            raise ValueError("cycle ranges must be non-negative")
        if not np.all(np.isin(self.counts, (0.5, 1.0))):
            raise ValueError("cycle counts must be 0.5 or 1")

    def __len__(self) -> int:
        return self.ranges.size

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def as_tuples(self) -> list[tuple[float, float, float]]:
        return list(zip(self.ranges.tolist(), self.means.tolist(), self.counts.tolist()))

    def scaled(self, c: float) -> "CycleSet":
        return CycleSet(self.ranges * abs(c), self.means * c, self.counts)


def reversals(series) -> np.ndarray:
    """Peaks and valleys of ``series`` including both end points."""
    x = np.asarray(series, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("series needs at least two points")
    if not np.all(np.isfinite(x)):
        raise ValueError("series contains non-finite values")
    x = x[np.concatenate([[True], np.diff(x) != 0])]
    if x.size < 2:
        return x[:1]
    d = np.diff(x)
    keep = np.concatenate([[True], d[1:] * d[:-1] < 0, [True]])
    return x[keep]


def rainflow(series) -> CycleSet:
    """Four-point rainflow count; the unclosed residue gives half cycles."""
    pts = reversals(series)
    if pts.size < 2:
        return CycleSet(np.empty(0), np.empty(0), np.empty(0))
    rng, mean, cnt = [], [], []
    stack: list[float] = []
    for p in pts:
        stack.append(p)
        while len(stack) >= 4:
            s1, s2, s3, s4 = stack[-4:]
            inner = abs(s3 - s2)
            if inner < abs(s2 - s1) and inner <= abs(s4 - s3):
                rng.append(inner)
                mean.append(0.5 * (s2 + s3))
                cnt.append(1.0)
                del stack[-3:-1]
            else:
                break
    for a, b in zip(stack[:-1], stack[1:]):
        rng.append(abs(b - a))
        mean.append(0.5 * (a + b))
        cnt.append(0.5)
    return CycleSet(np.array(rng), np.array(mean), np.array(cnt))


def damage_equivalent_load(cycles: CycleSet, m: float = 4.0, n_ref: float | None = None) -> float:
    """``(sum n_i S_i^m / N_ref)^(1/m)``; N_ref defaults to the total count."""
    if m <= 0:
        raise ValueError("Woehler exponent must be positive")
    if len(cycles) == 0:
        return 0.0
    n_ref = cycles.total if n_ref is None else n_ref
    if n_ref <= 0:
        raise ValueError("reference cycle count must be positive")
    return float((np.sum(cycles.counts * cycles.ranges**m) / n_ref) ** (1.0 / m))


def sn_histogram(cycles: CycleSet, bins: int = 50,
                 range_max: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative exceedance counts at ``bins`` equally spaced range levels.

    Returns (edges, counts) where ``counts[i]`` is the number of cycles with
    range in ``[edges[i], inf)``.  ``edges`` are the lower bin edges.
    """
    if bins < 1:
        raise ValueError("need at least one bin")
    top = (cycles.ranges.max() if len(cycles) else 1.0) if range_max is None else range_max
    edges = np.linspace(0.0, top, bins + 1)
    hist, _ = np.histogram(cycles.ranges, bins=edges, weights=cycles.counts)
    cum = np.cumsum(hist[::-1])[::-1]
    return edges[:-1], cum


@dataclass(frozen=True)
class FatigueReport:
    del_: float
    edges: np.ndarray
    cum_counts: np.ndarray
    m: float
    n_ref: float
    cycles: CycleSet


def fatigue_report(series, m: float = 4.0, n_ref: float | None = None, bins: int = 50,
                   range_max: float | None = None) -> FatigueReport:
    cyc = rainflow(series)
    n_ref = cyc.total if n_ref is None else n_ref
    edges, cum = sn_histogram(cyc, bins, range_max)
    return FatigueReport(damage_equivalent_load(cyc, m, n_ref or None), edges, cum,
                         m, float(n_ref), cyc)


def accuracy_metrics(estimate, truth) -> dict[str, float]:
    """Pearson CC and MRE% (mean absolute error over RMS of the truth)."""
    e = np.asarray(estimate, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if e.shape != t.shape:
        raise ValueError("estimate and truth must have equal length")
    if np.ptp(t) == 0:
        raise ValueError("truth has zero variance")
    cc = float(np.corrcoef(e, t)[0, 1])
    mre = float(100.0 * np.mean(np.abs(e - t)) / np.sqrt(np.mean(t**2)))
    return {"CC": cc, "MRE": mre}
