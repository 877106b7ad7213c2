"""Image quality metrics: PSNR, per-pixel reconstruction error, SSIM.

PSNR uses the per-pixel MSE with peak 1, which makes it the exact negative of
the reconstruction error in dB.  ``convention="literal"`` keeps the sum of
squared errors instead (no division by the pixel count).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import DimensionError

CLAMP_DB = 120.0


def _flat_pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64).ravel()
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    if x.shape != x_hat.shape:
        raise DimensionError(f"images differ in size: {x.size} vs {x_hat.size}")
    return x, x_hat


def _clamped_db(value):
    if value == -np.inf:
        return -CLAMP_DB
    return float(np.clip(value, -CLAMP_DB, CLAMP_DB))


def is_clamped(db):
    """True when a dB value hit the +/-120 dB clamp (identical images)."""
    return abs(db) >= CLAMP_DB


def reconstruction_error_db(x, x_hat, n=None):
    """10 log10(||x - x_hat||^2 / n); identical inputs clamp to -120 dB."""
    x, x_hat = _flat_pair(x, x_hat)
    n = x.size if n is None else n
    sse = float(np.sum((x - x_hat) ** 2))
    with np.errstate(divide="ignore"):
        return _clamped_db(10.0 * np.log10(sse / n))


def psnr_db(x, x_hat, n=None, convention="per_pixel"):
    """PSNR with unit peak.

    ``per_pixel``: -10 log10(MSE), equal to ``-reconstruction_error_db``.
    ``literal``: -10 log10(||x - x_hat||^2).
    """
    x, x_hat = _flat_pair(x, x_hat)
    if convention == "per_pixel":
        return -reconstruction_error_db(x, x_hat, n)
    if convention != "literal":
        raise ValueError(f"unknown PSNR convention {convention!r}")
    sse = float(np.sum((x - x_hat) ** 2))
    with np.errstate(divide="ignore"):
        return -_clamped_db(10.0 * np.log10(sse))


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _global_ssim(a, b, C1, C2):
    mu_a, mu_b = a.mean(), b.mean()
    var_a, var_b = a.var(), b.var()
    cov = np.mean((a - mu_a) * (b - mu_b))
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(num / den)


def ssim(x, x_hat, shape=None, window=11, sigma=1.5, K1=0.01, K2=0.03, L=1.0):
    """Mean SSIM over all fully-contained Gaussian windows.

    Flat inputs are reshaped to ``shape``; images smaller than the window
    fall back to one global (unweighted) SSIM.  Colour images (rows, cols,
    channels) average the per-channel values.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if shape is not None:
        a, b = a.reshape(shape), b.reshape(shape)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], None, window, sigma, K1, K2, L)
                              for c in range(a.shape[2])]))
    if a.ndim == 1:
        a, b = a[None, :], b[None, :]
    if a.shape != b.shape:
        raise DimensionError(f"images differ in shape: {a.shape} vs {b.shape}")
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    if a.shape[0] < window or a.shape[1] < window:
        return _global_ssim(a, b, C1, C2)
    w = gaussian_window(window, sigma)

    def filt(img):
        return convolve2d(img, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def mean_se(values):
    """Mean and population standard error of the mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std() / np.sqrt(v.size))


@dataclass
class MetricsRecord:
    """One row of batch-level quality metrics."""

    experiment: str
    epoch: int
    m: int
    k: int
    s: int
    psnr_db: float
    ssim: float
    re_db: float
    n_images: int
    psnr_se: float = float("nan")
    ssim_se: float = float("nan")
    re_se: float = float("nan")

    def as_dict(self):
        return asdict(self)


def per_image_metrics(X, X_hat, shape=None, clip=True):
    """Arrays of (psnr, ssim, re) for matching rows of ``X`` and ``X_hat``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X_hat = np.atleast_2d(np.asarray(X_hat, dtype=np.float64))
    if clip:
        X_hat = np.clip(X_hat, 0.0, 1.0)
    psnr = np.array([psnr_db(a, b) for a, b in zip(X, X_hat)])
    re = -psnr
    ss = np.array([ssim(a, b, shape) for a, b in zip(X, X_hat)])
    return psnr, ss, re


def batch_record(X, X_hat, shape=None, experiment="", epoch=0, m=0, k=0, s=0):
    psnr, ss, re = per_image_metrics(X, X_hat, shape)
    (p, p_se), (q, q_se), (r, r_se) = mean_se(psnr), mean_se(ss), mean_se(re)
    return MetricsRecord(experiment, epoch, m, k, s, p, q, r, len(psnr), p_se, q_se, r_se)
