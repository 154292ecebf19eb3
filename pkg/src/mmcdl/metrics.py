"""Full-reference image quality: PSNR, RMSE and SSIM, plus error maps."""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mmcdl.core import as_image
from mmcdl.errors import DimensionError, InputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class SsimFallbackWarning(UserWarning):
    """The image was smaller than the SSIM window; one global window was used."""


@dataclass(frozen=True)
class QualityReport:
    name: str
    psnr: float
    rmse: float
    ssim: float
    peak: float = 1.0

    def as_row(self):
        return {"name": self.name, "psnr": self.psnr, "rmse": self.rmse,
                "ssim": self.ssim, "peak": self.peak}


def _pair(a, b):
    a = as_image(a, "reference")
    b = as_image(b, "candidate")
    if a.shape != b.shape:
        raise DimensionError(f"images differ in size: {a.shape} vs {b.shape}")
    return a, b


def _check_peak(peak):
    if not peak > 0:
        raise InputError(f"peak must be positive, got {peak}")


def mse(a, b):
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def rmse(a, b):
    return math.sqrt(mse(a, b))


def psnr(a, b, peak=1.0):
    """``10 log10(peak^2 / MSE)``; identical images give ``inf``."""
    _check_peak(peak)
    m = mse(a, b)
    if m == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / m)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = (size - 1) / 2.0
    x = np.arange(size) - r
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation, keeping only fully covered positions
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a, b, peak=1.0):
    """Local SSIM over every fully contained 11x11 Gaussian window."""
    a, b = _pair(a, b)
    _check_peak(peak)
    if min(a.shape) < SSIM_WINDOW:
        raise DimensionError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def _ssim_global(a, b, peak):
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cov = np.mean((a - ma) * (b - mb))
    return float((2 * ma * mb + c1) * (2 * cov + c2)
                 / ((ma * ma + mb * mb + c1) * (va + vb + c2)))


def ssim(a, b, peak=1.0):
    """Mean structural similarity (11x11 Gaussian window, sigma 1.5).

    Images smaller than the window are compared through one global window
    and a :class:`SsimFallbackWarning` is issued.
    """
    a, b = _pair(a, b)
    _check_peak(peak)
    if min(a.shape) < SSIM_WINDOW:
        warnings.warn(f"image {a.shape} smaller than the SSIM window; using a global window",
                      SsimFallbackWarning, stacklevel=2)
        return _ssim_global(a, b, peak)
    return float(np.mean(ssim_map(a, b, peak)))


def error_map(a, b):
    a, b = _pair(a, b)
    return np.abs(a - b)


def error_map_8bit(a, b, vmax=0.1):
    """Absolute error scaled so ``vmax`` maps to 255; larger errors clamp."""
    if not vmax > 0:
        raise InputError("vmax must be positive")
    e = error_map(a, b) / vmax
    return np.round(np.clip(e, 0.0, 1.0) * 255.0).astype(np.uint8)


def evaluate(truth, candidate, peak=1.0, name=""):
    truth, candidate = _pair(truth, candidate)
    return QualityReport(name, psnr(truth, candidate, peak), rmse(truth, candidate),
                         ssim(truth, candidate, peak), peak)
