"""Mergeable histograms and moment accumulators.

Both structures are built per shard and combined with ``merge``.  Counts are
integers, so histogram merging is exact in any order; moment merging follows
Chan et al.'s pairwise update and is applied in shard order by the campaign
driver to keep results bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _bin_index(x: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    # right edge belongs to the last bin
    idx = np.floor((x - lo) * (bins / (hi - lo))).astype(np.int64)
    idx[x == hi] = bins - 1
    return idx


@dataclass
class Histogram1D:
    bins: int = 200
    lo: float = 0.0
    hi: float = 1.0
    counts: np.ndarray = None
    underflow: int = 0
    overflow: int = 0

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if not self.hi > self.lo:
            raise ValueError("hi must exceed lo")
        if self.counts is None:
            self.counts = np.zeros(self.bins, dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.bins,):
                raise ValueError("counts do not match bins")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.bins

    def add(self, values) -> None:
        x = np.asarray(values, dtype=float).ravel()
        x = x[~np.isnan(x)]
        below = x < self.lo
        above = x > self.hi
        self.underflow += int(below.sum())
        self.overflow += int(above.sum())
        inside = x[~(below | above)]
        self.counts += np.bincount(_bin_index(inside, self.lo, self.hi, self.bins), minlength=self.bins)

    def compatible(self, other: Histogram1D) -> bool:
        return (self.bins, self.lo, self.hi) == (other.bins, other.lo, other.hi)

    def merge(self, other: Histogram1D) -> Histogram1D:
        if not self.compatible(other):
            raise ValueError("cannot merge histograms with different edges")
        return Histogram1D(self.bins, self.lo, self.hi, self.counts + other.counts,
                           self.underflow + other.underflow, self.overflow + other.overflow)

    def density(self) -> np.ndarray:
        """Counts normalised so that the density integrates to the in-range fraction."""
        if self.total == 0:
            return np.zeros(self.bins)
        return self.counts / (self.total * self.width)


@dataclass
class Histogram2D:
    """Joint counts over an ``(x, y)`` grid; rows are x bins."""

    x_bins: int = 100
    y_bins: int = 100
    x_range: tuple = (0.0, 1.0)
    y_range: tuple = (0.0, 1.0)
    counts: np.ndarray = None
    outside: int = 0

    def __post_init__(self):
        if self.x_bins < 2 or self.y_bins < 2:
            raise ValueError("bins must be >= 2")
        if self.counts is None:
            self.counts = np.zeros((self.x_bins, self.y_bins), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.outside

    def add(self, x, y) -> None:
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        ok = ~(np.isnan(x) | np.isnan(y))
        x, y = x[ok], y[ok]
        (xl, xh), (yl, yh) = self.x_range, self.y_range
        inside = (x >= xl) & (x <= xh) & (y >= yl) & (y <= yh)
        self.outside += int((~inside).sum())
        ix = _bin_index(x[inside], xl, xh, self.x_bins)
        iy = _bin_index(y[inside], yl, yh, self.y_bins)
        flat = np.bincount(ix * self.y_bins + iy, minlength=self.x_bins * self.y_bins)
        self.counts += flat.reshape(self.x_bins, self.y_bins)

    def merge(self, other: Histogram2D) -> Histogram2D:
        if (self.x_bins, self.y_bins, self.x_range, self.y_range) != (
            other.x_bins, other.y_bins, other.x_range, other.y_range
        ):
            raise ValueError("cannot merge histograms with different edges")
        return Histogram2D(self.x_bins, self.y_bins, self.x_range, self.y_range,
                           self.counts + other.counts, self.outside + other.outside)

    def column_normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-x-column probability mass over y and a mask of empty columns."""
        col = self.counts.sum(axis=1)
        empty = col == 0
        mass = np.zeros(self.counts.shape)
        mass[~empty] = self.counts[~empty] / col[~empty, None]
        return mass, empty


@dataclass
class RunningMoments:
    """Count, mean and sum of squared deviations, mergeable pairwise."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    min: float = field(default=np.inf)
    max: float = field(default=-np.inf)

    @classmethod
    def from_values(cls, values) -> RunningMoments:
        x = np.asarray(values, dtype=float).ravel()
        if x.size == 0:
            return cls()
        lo, hi = float(x.min()), float(x.max())
        if lo == hi:
            return cls(int(x.size), lo, 0.0, lo, hi)
        mu = float(x.mean())
        d = x - mu
        # second pass corrects the mean for rounding in the first
        mu += float(d.mean())
        d = x - mu
        return cls(int(x.size), mu, float(np.dot(d, d)), lo, hi)

    def merge(self, other: RunningMoments) -> RunningMoments:
        if other.count == 0:
            return RunningMoments(self.count, self.mean, self.m2, self.min, self.max)
        if self.count == 0:
            return RunningMoments(other.count, other.mean, other.m2, other.min, other.max)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return RunningMoments(n, mean, m2, min(self.min, other.min), max(self.max, other.max))

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))

    @property
    def sem(self) -> float:
        return self.std / np.sqrt(self.count) if self.count else float("nan")

    def as_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "std": self.std, "sem": self.sem,
                "min": self.min, "max": self.max}
