"""Image quality metrics on float images in [0, 1].

Both metrics are exactly symmetric in their arguments: squared differences
and the structural-similarity cross terms are computed with commutative
operations only. Comparing an image against itself gives +inf PSNR and a
structural similarity of exactly 1.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float

    def to_json_dict(self) -> dict:
        return {
            "psnr": "inf" if math.isinf(self.psnr) else self.psnr,
            "ssim": self.ssim,
        }


def _check_images(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"expected shape (3, H, W), got {a.shape}")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    a, b = _check_images(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(channel: np.ndarray, window: np.ndarray) -> np.ndarray:
    out = convolve2d(channel, window[:, None], mode="valid")
    return convolve2d(out, window[None, :], mode="valid")


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 1.0,
) -> float:
    """Mean structural similarity with a Gaussian window, valid region only.

    Channel maps are averaged over the valid (fully overlapped) region, then
    across channels.
    """
    a, b = _check_images(a, b)
    if a.shape[1] < window_size or a.shape[2] < window_size:
        raise ValueError(f"images must be at least {window_size}x{window_size}, got {a.shape[1]}x{a.shape[2]}")
    window = _gaussian_window(window_size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    channel_means = []
    for c in range(3):
        x, y = a[c], b[c]
        mu_x = _filter_valid(x, window)
        mu_y = _filter_valid(y, window)
        var_x = _filter_valid(x * x, window) - mu_x * mu_x
        var_y = _filter_valid(y * y, window) - mu_y * mu_y
        cov = _filter_valid(x * y, window) - mu_x * mu_y
        numerator = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        channel_means.append(float(np.mean(numerator / denominator)))
    return float(np.mean(channel_means))


def evaluate_pair(restored: np.ndarray, reference: np.ndarray) -> MetricReport:
    return MetricReport(psnr=psnr(restored, reference), ssim=ssim(restored, reference))
