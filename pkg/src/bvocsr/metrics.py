"""Image quality metrics for super-resolved emission maps.

Every metric takes ``(est, ref)`` with ``ref`` the ground truth. Windowed
metrics use reflected boundaries. Zero-error NMSE/PSNR values are floored or
capped at -/+300 dB instead of returning infinities.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

DB_FLOOR = -300.0
DB_CAP = 300.0

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
UIQI_WIN = 8
LAPLACIAN = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])

METRIC_NAMES = ("nmse_db", "maxae", "ssim", "psnr_db", "uiqi", "scc")


def _pair(est, ref):
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {ref.shape}")
    return est, ref


def mse(est, ref) -> float:
    est, ref = _pair(est, ref)
    return float(np.mean((est - ref) ** 2))


def nmse(est, ref) -> float:
    """10 log10(MSE / mean(ref**2)) in dB; NaN when ``ref`` is all zero."""
    est, ref = _pair(est, ref)
    power = float(np.mean(ref ** 2))
    if power == 0.0:
        return math.nan
    err = mse(est, ref)
    if err == 0.0:
        return DB_FLOOR
    return max(DB_FLOOR, 10.0 * math.log10(err / power))


def maxae(est, ref) -> float:
    est, ref = _pair(est, ref)
    return float(np.max(np.abs(est - ref)))


def data_range_of(ref) -> float:
    """Per-image dynamic range max - min; 1.0 for a constant image."""
    ref = np.asarray(ref, dtype=np.float64)
    dr = float(ref.max() - ref.min())
    return dr if dr > 0 else 1.0


def psnr(est, ref, data_range: float | None = None) -> float:
    est, ref = _pair(est, ref)
    dr = data_range_of(ref) if data_range is None else float(data_range)
    err = mse(est, ref)
    if err == 0.0:
        return DB_CAP
    return min(DB_CAP, 10.0 * math.log10(dr * dr / err))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(est, ref, data_range: float | None = None) -> np.ndarray:
    est, ref = _pair(est, ref)
    dr = data_range_of(ref) if data_range is None else float(data_range)
    c1 = (SSIM_K1 * dr) ** 2
    c2 = (SSIM_K2 * dr) ** 2
    w = gaussian_window()

    def filt(a):
        return ndimage.correlate(a, w, mode="reflect")

    mx, my = filt(est), filt(ref)
    sxx = filt(est * est) - mx * mx
    syy = filt(ref * ref) - my * my
    sxy = filt(est * ref) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(est, ref, data_range: float | None = None) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03).

    ``data_range`` defaults to the range of ``ref``.
    """
    return float(np.mean(ssim_map(est, ref, data_range)))


def uiqi(est, ref, win: int = UIQI_WIN) -> float:
    """Universal image quality index averaged over all ``win x win`` windows.

    Windows where the index is 0/0 (flat and zero-mean content) are skipped;
    NaN if every window is degenerate.
    """
    est, ref = _pair(est, ref)
    if min(est.shape) < win:
        raise ValueError(f"image smaller than the {win}x{win} UIQI window")
    x = np.lib.stride_tricks.sliding_window_view(est, (win, win))
    y = np.lib.stride_tricks.sliding_window_view(ref, (win, win))
    mx = x.mean(axis=(-2, -1))
    my = y.mean(axis=(-2, -1))
    dx = x - mx[..., None, None]
    dy = y - my[..., None, None]
    vx = (dx * dx).mean(axis=(-2, -1))
    vy = (dy * dy).mean(axis=(-2, -1))
    cxy = (dx * dy).mean(axis=(-2, -1))
    den = (vx + vy) * (mx * mx + my * my)
    ok = den != 0
    if not ok.any():
        return math.nan
    q = 4.0 * cxy[ok] * mx[ok] * my[ok] / den[ok]
    return float(np.mean(q))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.sum(da * da))
    sbb = float(np.sum(db * db))
    if saa == 0.0 or sbb == 0.0:
        return math.nan
    r = float(np.sum(da * db)) / (math.sqrt(saa) * math.sqrt(sbb))
    return min(1.0, max(-1.0, r))


def highpass(img) -> np.ndarray:
    return ndimage.correlate(np.asarray(img, dtype=np.float64), LAPLACIAN, mode="reflect")


def scc(est, ref) -> float:
    """Spatial correlation coefficient: Pearson correlation of Laplacian high-pass images."""
    est, ref = _pair(est, ref)
    return _pearson(highpass(est).ravel(), highpass(ref).ravel())


def nir_from_db(nmse_est_db: float, nmse_ref_db: float) -> float:
    """(NMSE_est - NMSE_ref) / NMSE_ref; positive when the estimate improves on the reference."""
    if nmse_ref_db == 0.0 or math.isnan(nmse_ref_db):
        return math.nan
    return (nmse_est_db - nmse_ref_db) / nmse_ref_db


def nir(est_t, ref_baseline_t, truth_t) -> float:
    """NMSE improvement ratio of ``est_t`` over the single-channel baseline output,
    both scored against ``truth_t`` in the transformed domain."""
    return nir_from_db(nmse(est_t, truth_t), nmse(ref_baseline_t, truth_t))


def evaluate_pair(est, ref, data_range: float | None = None) -> dict[str, float]:
    return {
        "nmse_db": nmse(est, ref),
        "maxae": maxae(est, ref),
        "ssim": ssim(est, ref, data_range),
        "psnr_db": psnr(est, ref, data_range),
        "uiqi": uiqi(est, ref),
        "scc": scc(est, ref),
    }


# ---------------------------------------------------------------------------
# Reports

DOMAINS = ("transformed", "isoprene")


@dataclass
class MetricsReport:
    """Per-patch metric records plus per-domain aggregates."""

    records: list[dict] = field(default_factory=list)

    def add(self, patch_id: int, domain: str, est, ref) -> dict:
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}")
        rec = {"patch_id": int(patch_id), "domain": domain, **evaluate_pair(est, ref)}
        self.records.append(rec)
        return rec

    def domains(self) -> list[str]:
        return [d for d in DOMAINS if any(r["domain"] == d for r in self.records)]

    def aggregates(self) -> dict[str, dict[str, dict[str, float]]]:
        """``{domain: {metric: {"avg": .., "std": .., "n": ..}}}``, NaNs ignored."""
        out = {}
        for d in self.domains():
            rows = [r for r in self.records if r["domain"] == d]
            out[d] = {}
            for m in METRIC_NAMES:
                vals = np.array([r[m] for r in rows], dtype=np.float64)
                vals = vals[~np.isnan(vals)]
                out[d][m] = {
                    "avg": float(vals.mean()) if vals.size else math.nan,
                    "std": float(vals.std()) if vals.size else math.nan,
                    "n": int(vals.size),
                }
        return out

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["patch_id", "domain", *METRIC_NAMES],
                               lineterminator="\n")
            w.writeheader()
            for r in sorted(self.records, key=lambda r: (r["domain"], r["patch_id"])):
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        recs = []
        for r in rows:
            rec = {"patch_id": int(r["patch_id"]), "domain": r["domain"]}
            rec.update({m: float(r[m]) for m in METRIC_NAMES})
            recs.append(rec)
        return cls(recs)
