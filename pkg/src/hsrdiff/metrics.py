"""PSNR, SSIM, SAM and ERGAS for (bands, height, width) cubes on a unit dynamic range."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    sam_deg: float
    ergas: float

    def row(self, name: str) -> str:
        return f"{name}\t{self.psnr_db:.2f}\t{self.ssim:.4f}\t{self.sam_deg:.2f}\t{self.ergas:.3f}"


def _pair(ref, est) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch: reference {ref.shape} vs estimate {est.shape}")
    if ref.ndim != 3:
        raise ValueError(f"expected (bands, height, width) cubes, got shape {ref.shape}")
    return ref, est


def band_mse(ref, est) -> np.ndarray:
    ref, est = _pair(ref, est)
    return ((ref - est) ** 2).mean(axis=(1, 2))


def psnr(ref, est) -> float:
    """Mean over bands of 10*log10(1/MSE_b); a band with zero error scores the 99 dB cap."""
    mse = band_mse(ref, est)
    with np.errstate(divide="ignore"):
        per_band = np.where(mse > 0, 10.0 * np.log10(1.0 / np.where(mse > 0, mse, 1.0)), PSNR_CAP)
    return float(np.minimum(per_band, PSNR_CAP).mean())


def sam(ref, est) -> float:
    """Mean spectral angle in degrees over pixels where both spectra are nonzero."""
    ref, est = _pair(ref, est)
    b = ref.shape[0]
    r = ref.reshape(b, -1)
    e = est.reshape(b, -1)
    nr = np.sqrt((r * r).sum(axis=0))
    ne = np.sqrt((e * e).sum(axis=0))
    valid = (nr > 0) & (ne > 0)
    if not valid.any():
        raise ValueError("no pixel has a nonzero spectrum in both cubes")
    # half-angle form stays exact at 0 where arccos of a rounded cosine would not
    u = r[:, valid] / nr[valid]
    v = e[:, valid] / ne[valid]
    diff = np.sqrt(((u - v) ** 2).sum(axis=0))
    summ = np.sqrt(((u + v) ** 2).sum(axis=0))
    return float(np.degrees(2.0 * np.arctan2(diff, summ)).mean())


def ergas(ref, est, factor: int) -> float:
    ref, est = _pair(ref, est)
    mu = ref.mean(axis=(1, 2))
    zero = np.flatnonzero(mu == 0)
    if zero.size:
        raise ValueError(f"reference band {int(zero[0])} has zero mean; ERGAS undefined")
    mse = band_mse(ref, est)
    return float(100.0 / factor * math.sqrt(np.mean(mse / mu ** 2)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    u = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (u / sigma) ** 2)
    return g / g.sum()


def _local_mean(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_band(ref: np.ndarray, est: np.ndarray) -> float:
    """SSIM of one band averaged over all fully-contained 11x11 Gaussian windows."""
    if min(ref.shape) < SSIM_WINDOW:
        raise ValueError(f"image {ref.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    mx, my = _local_mean(ref, g), _local_mean(est, g)
    sxx = _local_mean(ref * ref, g) - mx * mx
    syy = _local_mean(est * est, g) - my * my
    sxy = _local_mean(ref * est, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float((num / den).mean())


def ssim(ref, est) -> float:
    ref, est = _pair(ref, est)
    return float(np.mean([ssim_band(r, e) for r, e in zip(ref, est)]))


def evaluate(ref, est, factor: int) -> MetricReport:
    return MetricReport(psnr(ref, est), ssim(ref, est), sam(ref, est), ergas(ref, est, factor))


def mean_report(reports: list[MetricReport]) -> MetricReport:
    return MetricReport(*(float(np.mean([getattr(r, f) for r in reports]))
                          for f in ("psnr_db", "ssim", "sam_deg", "ergas")))
