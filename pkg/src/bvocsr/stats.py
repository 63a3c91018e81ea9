"""Correlation and entropy statistics used to pick emission drivers."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

DEFAULT_BINS = 32


def pcc(a, b) -> float:
    """Pearson correlation over cells where both inputs are present.

    Returns NaN when fewer than two pairs remain or either side has zero variance.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.size} vs {b.size}")
    keep = ~(np.isnan(a) | np.isnan(b))
    a, b = a[keep], b[keep]
    if a.size < 2:
        return math.nan
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.dot(da, da))
    sbb = float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        return math.nan
    # sqrt of the product keeps pcc(x, x) and pcc(x, -x) exact
    den = math.sqrt(saa * sbb)
    if not math.isfinite(den) or den == 0.0:
        den = math.sqrt(saa) * math.sqrt(sbb)
    r = float(np.dot(da, db)) / den
    return min(1.0, max(-1.0, r))


def uniform_bins(x, bins: int) -> np.ndarray:
    """Bin index of each value for ``bins`` equal-width bins over [min, max].

    The maximum falls in the last bin; a constant input is all bin 0.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(x.size, dtype=np.int64)
    idx = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _entropy_bits(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def entropy(x, bins: int = DEFAULT_BINS) -> float:
    """Shannon entropy (bits) of the binned values of ``x``."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    return _entropy_bits(np.bincount(uniform_bins(x, bins), minlength=bins))


def conditional_entropy(x, y, bins: int = DEFAULT_BINS) -> float:
    """H(X|Y) in bits from the joint histogram of per-patch min-max binned values.

    Computed as -sum p(x,y) log2(p(x,y)/p(y)), which equals H(X,Y) - H(Y) and
    is exactly zero when X is a function of Y.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    bx = uniform_bins(x, bins)
    by = uniform_bins(y, bins)
    joint = np.bincount(bx * bins + by, minlength=bins * bins).reshape(bins, bins)
    py = joint.sum(axis=0)
    n = joint.sum()
    nz = joint > 0
    pxy = joint[nz] / n
    ratio = joint[nz] / np.broadcast_to(py, joint.shape)[nz]
    h = float(-np.sum(pxy * np.log2(ratio)))
    return max(h, 0.0)


@dataclass
class Summary:
    mean: float
    std: float
    median: float
    n: int

    @classmethod
    def of(cls, values) -> "Summary":
        v = np.asarray(values, dtype=np.float64)
        v = v[~np.isnan(v)]
        if v.size == 0:
            return cls(math.nan, math.nan, math.nan, 0)
        return cls(float(v.mean()), float(v.std()), float(np.median(v)), int(v.size))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "median": self.median, "n": self.n}


@dataclass
class SpatialCorrelation:
    patch_ids: list[int]
    values: np.ndarray
    summary: Summary


@dataclass
class EntropyReport:
    patch_ids: list[int]
    conditional: np.ndarray  # H(isop | driver), bits
    marginal: np.ndarray  # H(isop), bits
    summary: Summary


@dataclass
class CorrelationSeries:
    dates: list
    mean_isoprene: np.ndarray
    mean_driver: np.ndarray
    pcc_per_date: np.ndarray


def spatial_correlation_study(emissions, drivers, patch_ids=None) -> SpatialCorrelation:
    """One Pearson coefficient per patch between emission and driver cells."""
    values = np.array([pcc(e, d) for e, d in zip(emissions, drivers)], dtype=np.float64)
    ids = list(range(len(values))) if patch_ids is None else list(patch_ids)
    return SpatialCorrelation(ids, values, Summary.of(values))


def entropy_study(emissions, drivers, bins: int = DEFAULT_BINS, patch_ids=None) -> EntropyReport:
    cond = np.array([conditional_entropy(e, d, bins) for e, d in zip(emissions, drivers)])
    marg = np.array([entropy(e, bins) for e in emissions])
    ids = list(range(len(cond))) if patch_ids is None else list(patch_ids)
    return EntropyReport(ids, cond, marg, Summary.of(cond))


def temporal_correlation(dates, emissions, drivers) -> CorrelationSeries:
    """Per-date patch-averaged means and the cross-patch PCC of patch means.

    ``dates[i]`` is the acquisition date of the i-th (emission, driver) pair.
    """
    groups = defaultdict(lambda: ([], []))
    for d, e, v in zip(dates, emissions, drivers):
        groups[d][0].append(float(np.nanmean(e)))
        groups[d][1].append(float(np.nanmean(v)))
    order = sorted(groups)
    mi = np.array([np.mean(groups[d][0]) for d in order])
    md = np.array([np.mean(groups[d][1]) for d in order])
    rho = np.array([pcc(*groups[d]) for d in order])
    return CorrelationSeries(order, mi, md, rho)
