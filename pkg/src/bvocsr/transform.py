"""Rank-based transform of emission values onto a uniform [0, 1] scale.

The fitted model is a table of empirical quantiles at evenly spaced
probabilities. ``forward`` is piecewise-linear interpolation from values to
probabilities, ``inverse`` the reverse lookup. A run of tied quantiles (the
sea of exact zeros in a sparse emission map, say) maps to the middle of its
probability span, so tied inputs get one deterministic output.
"""

from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

DEFAULT_N_QUANTILES = 1000
FORMAT_VERSION = 1


def empirical_quantiles(values: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Quantiles by linear interpolation between order statistics.

    For sorted samples ``s[0..n-1]`` the quantile at probability ``p`` is
    ``s[h] + (h - floor(h)) * (s[floor(h)+1] - s[floor(h)])`` with ``h = (n-1) p``.
    """
    s = np.sort(np.asarray(values, dtype=np.float64))
    n = s.size
    h = (n - 1) * np.asarray(probs, dtype=np.float64)
    lo = np.clip(np.floor(h).astype(np.int64), 0, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    q = s[lo] + (h - lo) * (s[hi] - s[lo])
    # guard against rounding breaking monotonicity inside long ties
    return np.maximum.accumulate(q)


def _collect(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray) or np.isscalar(samples):
        chunks = [np.asarray(samples, dtype=np.float64).ravel()]
    else:
        chunks = [np.asarray(c, dtype=np.float64).ravel() for c in samples]
    values = np.concatenate(chunks) if chunks else np.empty(0)
    if np.isinf(values).any():
        raise DataError("non-finite sample in transform fit")
    return values[~np.isnan(values)]


@dataclass(frozen=True, eq=False)
class TransformModel:
    """Fitted quantile table; ``quantile_grid[k]`` is the quantile at k/(n_q-1)."""

    quantile_grid: np.ndarray
    n_fitted: int

    def __post_init__(self):
        q = np.array(self.quantile_grid, dtype=np.float64, copy=True)
        if q.ndim != 1 or q.size < 2:
            raise ValueError("quantile_grid must be 1-D with at least two entries")
        if not np.all(np.isfinite(q)) or np.any(np.diff(q) < 0):
            raise ValueError("quantile_grid must be finite and non-decreasing")
        q.flags.writeable = False
        object.__setattr__(self, "quantile_grid", q)

    @property
    def n_q(self) -> int:
        return self.quantile_grid.size

    @property
    def references(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_q)

    @property
    def vmin(self) -> float:
        return float(self.quantile_grid[0])

    @property
    def vmax(self) -> float:
        return float(self.quantile_grid[-1])

    def forward(self, x):
        """Map emission values to [0, 1]. NaN passes through; out-of-range values clamp."""
        arr = np.asarray(x, dtype=np.float64)
        if np.isinf(arr).any():
            raise DataError("non-finite input to transform")
        q, r = self.quantile_grid, self.references
        # Averaging the left- and right-continuous interpolants puts ties at mid-span.
        up = np.interp(arr, q, r)
        down = -np.interp(-arr, -q[::-1], -r[::-1])
        out = np.clip(0.5 * (up + down), 0.0, 1.0)
        out = np.where(np.isnan(arr), np.nan, out)
        return float(out) if out.ndim == 0 else out

    def inverse(self, u):
        """Map [0, 1] values back to emissions (input is clamped to [0, 1] first)."""
        arr = np.asarray(u, dtype=np.float64)
        out = np.interp(np.clip(arr, 0.0, 1.0), self.references, self.quantile_grid)
        out = np.where(np.isnan(arr), np.nan, out)
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "n_q": self.n_q,
            "n_fitted": int(self.n_fitted),
            "quantile_grid": [float(v) for v in self.quantile_grid],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformModel":
        if d.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported transform version {d.get('version')!r}")
        grid = np.asarray(d["quantile_grid"], dtype=np.float64)
        if grid.size != d["n_q"]:
            raise DataError("transform file: n_q does not match quantile_grid length")
        return cls(grid, int(d["n_fitted"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TransformModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit(samples: np.ndarray | Iterable[np.ndarray], n_quantiles: int = DEFAULT_N_QUANTILES,
        max_samples: int | None = None, seed: int = 0) -> TransformModel:
    """Fit the quantile table on emission samples.

    ``samples`` is an array or an iterable of arrays (e.g. one per patch); NaN
    entries are treated as missing and skipped. With ``max_samples`` set, a
    seeded uniform subsample of that size is used instead of every value.
    """
    if n_quantiles < 2:
        raise ValueError("n_quantiles must be >= 2")
    values = _collect(samples)
    if values.size < n_quantiles:
        raise DataError(f"need at least {n_quantiles} samples to fit, got {values.size}")
    n_total = values.size
    if max_samples is not None and n_total > max_samples:
        rng = np.random.Generator(np.random.Philox(seed))
        values = values[rng.choice(n_total, size=max_samples, replace=False)]
    grid = empirical_quantiles(values, np.linspace(0.0, 1.0, n_quantiles))
    return TransformModel(grid, int(values.size))
