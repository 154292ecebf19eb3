"""Guided restoration pipelines: denoising, super-resolution, inpainting.

Every pipeline extracts aligned target/guidance patch pairs, codes the
stacked pair against a coupled dictionary, rebuilds each target patch from
its common and target-specific coefficients only, and merges the patches
back into an image.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from mmcdl.core import (PatchGeometry, PatchSet, as_image, bicubic_upsample,
                        coverage_counts, extract_with_geometry, imresize, patch_sums,
                        aggregate_patches)
from mmcdl.dictlearn import DENOISE, SUPERRES
from mmcdl.errors import DimensionError, InputError, LayoutError
from mmcdl.sparse import StopRule, code_columns

PEAK = 255.0
NOISE_TOL_FACTOR = 1.15
MU_RANGE = (0.05, 30.0)


@dataclass
class DenoiseConfig:
    """Settings for :func:`denoise`.

    ``sigma`` is the noise standard deviation in [0, 1] intensity units.
    ``mu`` weighs the noisy image against the patch estimates; ``None``
    picks :func:`default_mu`. ``max_sparsity`` caps the error-constrained
    pursuit (``None``: the sparsity the dictionary was trained with).
    ``remove_dc=None`` follows the dictionary's provenance.
    """

    sigma: float
    mu: float | None = None
    patch_side: int | None = None
    stride: int = 1
    max_sparsity: int | None = None
    tol_factor: float = NOISE_TOL_FACTOR
    remove_dc: bool | None = None
    threads: int = 1

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InputError(f"sigma must be >= 0, got {self.sigma}")
        if self.mu is not None and not self.mu >= 0:
            raise InputError(f"mu must be >= 0, got {self.mu}")
        if self.stride < 1:
            raise InputError("stride must be >= 1")


@dataclass
class SrConfig:
    scale_factor: int = 4
    patch_side: int | None = None
    stride: int = 1
    max_sparsity: int | None = None
    remove_dc: bool | None = None
    threads: int = 1

    def __post_init__(self):
        if int(self.scale_factor) != self.scale_factor or self.scale_factor < 1:
            raise InputError(f"scale factor must be a positive integer, got {self.scale_factor}")
        self.scale_factor = int(self.scale_factor)
        if self.stride < 1:
            raise InputError("stride must be >= 1")


@dataclass
class InpaintConfig:
    patch_side: int | None = None
    stride: int = 1
    max_sparsity: int | None = None
    remove_dc: bool | None = None
    min_observed: float = 0.1
    threads: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise InputError("stride must be >= 1")
        if not 0 <= self.min_observed <= 1:
            raise InputError("min_observed must lie in [0, 1]")


@dataclass
class PatchMask:
    """Observed entries of every patch, cut from one image-level map."""

    geometry: PatchGeometry
    observed: np.ndarray

    @classmethod
    def from_map(cls, observed_map, geometry):
        m = extract_with_geometry(np.asarray(observed_map, dtype=np.float64), geometry)
        return cls(geometry, m.patches > 0.5)

    @property
    def fraction(self):
        return self.observed.mean(axis=0)

    def rows(self, i):
        return np.flatnonzero(self.observed[:, i])


@dataclass
class PipelineResult:
    image: np.ndarray
    codes: np.ndarray
    patches: PatchSet


def default_mu(n, sigma):
    """Fidelity weight ``n / (255 sigma)`` clipped to [0.05, 30]."""
    if sigma <= 0:
        return MU_RANGE[1]
    return float(np.clip(n / (sigma * PEAK), *MU_RANGE))


def _check_patch_side(cd, requested):
    if requested is not None and requested != cd.patch_side:
        raise DimensionError(
            f"patch side {requested} does not match the dictionary ({cd.patch_side})")
    return cd.patch_side


def _sparsity(cd, requested):
    if requested is not None:
        return int(requested)
    return int(cd.provenance.get("sparsity", 4))


def _remove_dc(cd, requested):
    return bool(cd.provenance.get("remove_dc", True)) if requested is None else requested


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ (images must be registered)")


def solve_fidelity_combine(noisy, patch_estimates, mu):
    """Closed-form merge of a noisy image with overlapping patch estimates.

    Minimizes ``mu ||X - noisy||^2 + sum_i ||R_i X - xhat_i||^2``. The system
    matrix ``mu I + sum_i R_i^T R_i`` is diagonal, so each pixel is the
    weighted mean of its noisy value (weight ``mu``) and the estimates
    covering it (weight 1 each).
    """
    noisy = as_image(noisy, "noisy")
    if not mu >= 0:
        raise InputError(f"mu must be >= 0, got {mu}")
    geom = patch_estimates.geometry
    if geom.shape != noisy.shape:
        raise DimensionError(f"estimates cover {geom.shape}, image is {noisy.shape}")
    sums = patch_sums(patch_estimates, add_dc=True)
    counts = coverage_counts(geom)
    return (mu * noisy + sums) / (mu + counts)


def _code_pairs(D, tgt, gde, stop, mask=None, threads=1):
    X = np.vstack([tgt, gde])
    batch = code_columns(D, X, stop, mask=mask, threads=threads)
    return batch.dense(D.shape[1])


def denoise(noisy, guidance, cd, cfg, return_details=False):
    """Guided denoising with a denoising-layout coupled dictionary.

    Each stacked pair ``[noisy patch; guidance patch]`` is coded by OMP until
    the squared residual falls to ``tol_factor * n * sigma^2`` (the expected
    noise energy on the ``n`` noisy rows) or the sparsity cap is reached.
    """
    if cd.layout != DENOISE:
        raise LayoutError(f"denoising needs a 'denoise' dictionary, got {cd.layout!r}")
    noisy = as_image(noisy, "noisy")
    guidance = as_image(guidance, "guidance")
    _same_shape(noisy, guidance, "denoise")
    p = _check_patch_side(cd, cfg.patch_side)
    geom = PatchGeometry(p, cfg.stride, *noisy.shape)
    dc = _remove_dc(cd, cfg.remove_dc)
    px = extract_with_geometry(noisy, geom, dc)
    py = extract_with_geometry(guidance, geom, dc)
    tol = cfg.tol_factor * cd.n * cfg.sigma ** 2
    stop = StopRule(max_sparsity=_sparsity(cd, cfg.max_sparsity), residual_tol=tol or None)
    A = _code_pairs(cd.stacked(), px.patches, py.patches, stop, threads=cfg.threads)
    est = px.with_patches(cd.target_estimator() @ A)
    mu = default_mu(cd.n, cfg.sigma) if cfg.mu is None else cfg.mu
    out = solve_fidelity_combine(noisy, est, mu)
    return PipelineResult(out, A, est) if return_details else out


def code_sr_patches(xl, y, cd, s, threads=1):
    """Code ``[upsampled LR; guidance]`` patch pairs on the reduced dictionary.

    The high-resolution rows take no part in coding; selection divides
    correlations by the reduced column norms, and the coefficients apply to
    the full columns, so ``target_estimator() @ A`` gives the HR patches.
    """
    R = cd.rows("x_l", "y")
    return _code_pairs(R, xl, y, StopRule(max_sparsity=s), threads=threads)


def superresolve(lr, guidance_hr, cd, cfg, return_details=False):
    """Guided super-resolution with a super-resolution-layout dictionary."""
    if cd.layout != SUPERRES:
        raise LayoutError(f"super-resolution needs a 'superres' dictionary, got {cd.layout!r}")
    lr = as_image(lr, "lr")
    guidance_hr = as_image(guidance_hr, "guidance")
    f = cfg.scale_factor
    if guidance_hr.shape != (lr.shape[0] * f, lr.shape[1] * f):
        raise DimensionError(
            f"guidance {guidance_hr.shape} is not {f}x the low-resolution image {lr.shape}")
    p = _check_patch_side(cd, cfg.patch_side)
    up = bicubic_upsample(lr, f)
    geom = PatchGeometry(p, cfg.stride, *up.shape)
    dc = _remove_dc(cd, cfg.remove_dc)
    pl = extract_with_geometry(up, geom, dc)
    py = extract_with_geometry(guidance_hr, geom, dc)
    A = code_sr_patches(pl.patches, py.patches, cd, _sparsity(cd, cfg.max_sparsity), cfg.threads)
    est = pl.with_patches(cd.target_estimator() @ A)
    out = aggregate_patches(est)
    return PipelineResult(out, A, est) if return_details else out


def _observed_means(vals, obs):
    cnt = obs.sum(axis=0)
    tot = np.where(obs, vals, 0.0).sum(axis=0)
    fallback = tot.sum() / cnt.sum() if cnt.sum() else 0.0
    return np.where(cnt > 0, tot / np.maximum(cnt, 1), fallback)


def inpaint(corrupted, observed_map, guidance, cd, cfg=None, return_details=False):
    """Fill unobserved target pixels from coupled codes.

    Target rows of each pair are restricted to the observed pixels (patches
    with fewer than ``min_observed`` observed pixels drop their target rows
    entirely) and coded by masked OMP against ``[target rows; guidance
    rows]`` of the dictionary. Both layouts work: for a super-resolution
    dictionary the high-resolution rows are used and the low-resolution
    rows are ignored. Observed pixels are copied through unchanged.
    """
    cfg = cfg or InpaintConfig()
    corrupted = as_image(corrupted, "corrupted")
    guidance = as_image(guidance, "guidance")
    omap = as_image(observed_map, "observed map")
    _same_shape(corrupted, guidance, "inpaint")
    _same_shape(corrupted, omap, "inpaint observation map")
    if not np.all((omap == 0) | (omap == 1)):
        raise InputError("observation map must be binary (0 = missing, 1 = observed)")
    observed = omap == 1
    if not observed.any():
        warnings.warn("no observed target pixels; reconstructing from guidance alone", stacklevel=2)
    p = _check_patch_side(cd, cfg.patch_side)
    geom = PatchGeometry(p, cfg.stride, *corrupted.shape)
    pm = PatchMask.from_map(omap, geom)
    obs = pm.observed & (pm.fraction >= cfg.min_observed)[None, :]
    dc = _remove_dc(cd, cfg.remove_dc)
    px = extract_with_geometry(corrupted, geom)
    py = extract_with_geometry(guidance, geom, dc)
    tgt = px.patches
    means = None
    if dc:
        means = _observed_means(tgt, pm.observed)
        tgt = tgt - means
    tgt = np.where(obs, tgt, 0.0)
    trow = cd.target_rows()
    R = cd.rows(trow, "y")
    mask = np.vstack([obs, np.ones_like(obs)])
    A = _code_pairs(R, tgt, py.patches, StopRule(max_sparsity=_sparsity(cd, cfg.max_sparsity)),
                    mask=mask, threads=cfg.threads)
    est = PatchSet(geom, cd.target_estimator() @ A, means)
    out = aggregate_patches(est)
    out[observed] = corrupted[observed]
    return PipelineResult(out, A, est) if return_details else out


def guidance_estimate(cd, codes):
    """Diagnostic guidance reconstruction ``phi_c z + phi v`` (never fed back)."""
    M = cd.rows("y").copy()
    M[:, cd.K:2 * cd.K] = 0.0
    return M @ codes


def add_gaussian_noise(img, sigma, seed=0):
    """``img`` plus seeded white Gaussian noise of standard deviation ``sigma``."""
    img = as_image(img)
    if not sigma >= 0:
        raise InputError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return img + sigma * rng.standard_normal(img.shape)


def degrade_for_sr(hr, scale):
    """Anti-aliased bicubic decimation by an integer factor.

    Rows and columns beyond the last full multiple of ``scale`` are cropped.
    """
    hr = as_image(hr, "hr")
    if int(scale) != scale or scale < 2:
        raise InputError(f"scale must be an integer >= 2, got {scale}")
    scale = int(scale)
    h, w = (hr.shape[0] // scale) * scale, (hr.shape[1] // scale) * scale
    if h == 0 or w == 0:
        raise DimensionError(f"image {hr.shape} is smaller than the scale factor {scale}")
    return imresize(hr[:h, :w], (h // scale, w // scale))


def crop_to_multiple(img, scale):
    h, w = (img.shape[0] // scale) * scale, (img.shape[1] // scale) * scale
    return img[:h, :w]
