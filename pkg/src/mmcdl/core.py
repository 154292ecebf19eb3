"""Image and patch primitives shared by every pipeline.

Images are plain 2-D ``float64`` arrays (rows x columns) with nominal
intensities in [0, 1]. Patches are square, vectorized in row-major pixel
order, and stored as the columns of an ``n x P`` matrix.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mmcdl.errors import DimensionError

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def as_image(img, name="image"):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DimensionError(f"{name} contains non-finite values")
    return arr


def _origins(size, patch_side, stride):
    last = size - patch_side
    orig = list(range(0, last + 1, stride))
    if orig[-1] != last:
        orig.append(last)
    return np.asarray(orig, dtype=np.int64)


@dataclass(frozen=True)
class PatchGeometry:
    """Where the patches of an image live.

    Origins form a grid: every row origin is paired with every column
    origin, in row-major order. The last origin along each axis is clamped
    to ``size - patch_side`` so that coverage is total.
    """

    patch_side: int
    stride: int
    image_height: int
    image_width: int

    def __post_init__(self):
        p = self.patch_side
        if p < 1 or self.stride < 1:
            raise DimensionError("patch_side and stride must be >= 1")
        if self.stride > p:
            # gaps between patches would leave pixels uncovered
            raise DimensionError(f"stride {self.stride} exceeds patch side {p}")
        if p > min(self.image_height, self.image_width):
            raise DimensionError(
                f"patch side {p} exceeds image size "
                f"{self.image_height}x{self.image_width}")

    @cached_property
    def row_origins(self):
        return _origins(self.image_height, self.patch_side, self.stride)

    @cached_property
    def col_origins(self):
        return _origins(self.image_width, self.patch_side, self.stride)

    @property
    def shape(self):
        return (self.image_height, self.image_width)

    @property
    def n(self):
        return self.patch_side * self.patch_side

    @property
    def count(self):
        return len(self.row_origins) * len(self.col_origins)

    @property
    def patch_origins(self):
        return [(int(r), int(c)) for r in self.row_origins for c in self.col_origins]


@dataclass
class PatchSet:
    geometry: PatchGeometry
    patches: np.ndarray
    means: np.ndarray | None = None

    def __post_init__(self):
        if self.patches.shape != (self.geometry.n, self.geometry.count):
            raise DimensionError(
                f"patch matrix shape {self.patches.shape} does not match geometry "
                f"({self.geometry.n}, {self.geometry.count})")
        if self.means is not None and self.means.shape != (self.geometry.count,):
            raise DimensionError("means must have one entry per patch")

    def with_patches(self, patches, means=None):
        return PatchSet(self.geometry, np.asarray(patches, dtype=np.float64),
                        self.means if means is None else means)


def extract_patches(img, patch_side, stride=1, remove_dc=False):
    """Vectorize every patch of ``img`` on the geometry's origin grid.

    With ``remove_dc`` each column has its mean subtracted; the means are
    kept on the returned :class:`PatchSet` so they can be restored.
    """
    img = as_image(img)
    geom = PatchGeometry(patch_side, stride, *img.shape)
    return extract_with_geometry(img, geom, remove_dc)


def extract_with_geometry(img, geom, remove_dc=False):
    img = as_image(img)
    if img.shape != geom.shape:
        raise DimensionError(f"image shape {img.shape} does not match geometry {geom.shape}")
    p = geom.patch_side
    win = sliding_window_view(img, (p, p))
    blocks = win[np.ix_(geom.row_origins, geom.col_origins)]
    patches = np.ascontiguousarray(blocks.reshape(geom.count, p * p).T)
    means = None
    if remove_dc:
        means = patches.mean(axis=0)
        patches -= means
    return PatchSet(geom, patches, means)


def coverage_counts(geom):
    """Per-pixel number of covering patches (the diagonal of sum R_i^T R_i)."""
    p = geom.patch_side
    rows = np.zeros(geom.image_height)
    cols = np.zeros(geom.image_width)
    for r in geom.row_origins:
        rows[r:r + p] += 1
    for c in geom.col_origins:
        cols[c:c + p] += 1
    return np.outer(rows, cols)


def patch_sums(ps, add_dc=True):
    """sum_i R_i^T x_i: scatter-add every patch back onto the image grid.

    Summation order per pixel is fixed (patch offset, then origin order), so
    the result is reproducible bit for bit.
    """
    geom = ps.geometry
    p = geom.patch_side
    vals = ps.patches
    if add_dc and ps.means is not None:
        vals = vals + ps.means
    nr, nc = len(geom.row_origins), len(geom.col_origins)
    blocks = vals.T.reshape(nr, nc, p, p)
    acc = np.zeros(geom.shape)
    rows, cols = geom.row_origins, geom.col_origins
    for di in range(p):
        for dj in range(p):
            acc[np.ix_(rows + di, cols + dj)] += blocks[:, :, di, dj]
    return acc


def aggregate_patches(ps, add_dc=True):
    """Rebuild an image by averaging overlapping patch values per pixel."""
    return patch_sums(ps, add_dc) / coverage_counts(ps.geometry)


def normalize_intensity(img, peak=255.0):
    if peak <= 0:
        raise ValueError("peak must be positive")
    return np.asarray(img, dtype=np.float64) / peak


def denormalize_intensity(img, peak=255.0):
    if peak <= 0:
        raise ValueError("peak must be positive")
    return np.asarray(img, dtype=np.float64) * peak


def to_luminance(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return rgb
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise DimensionError(f"expected an HxWx3 array, got {rgb.shape}")
    w = np.asarray(LUMA_WEIGHTS)
    return rgb[..., :3] @ w


def _cubic(x):
    # Keys kernel, a = -0.5
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return ((1.5 * ax3 - 2.5 * ax2 + 1) * (ax <= 1)
            + (-0.5 * ax3 + 2.5 * ax2 - 4 * ax + 2) * ((ax > 1) & (ax <= 2)))


def resize_matrix(n_in, n_out):
    """Dense 1-D bicubic resampling operator (``n_out x n_in``).

    Follows the usual ``imresize`` conventions: pixel-centre alignment,
    kernel widened by the reduction factor when shrinking (anti-aliasing),
    and symmetric boundary extension.
    """
    scale = n_out / n_in
    width = 4.0 / scale if scale < 1 else 4.0
    x = np.arange(1, n_out + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - idx
    if scale < 1:
        w = scale * _cubic(scale * dist)
    else:
        w = _cubic(dist)
    w /= w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(n_in), np.arange(n_in - 1, -1, -1)])
    cols = mirror[np.mod(idx.astype(np.int64) - 1, 2 * n_in)]
    W = np.zeros((n_out, n_in))
    rows = np.broadcast_to(np.arange(n_out)[:, None], cols.shape)
    np.add.at(W, (rows, cols), w)
    return W


def imresize(img, shape):
    img = as_image(img)
    Wr = resize_matrix(img.shape[0], shape[0])
    Wc = resize_matrix(img.shape[1], shape[1])
    return Wr @ img @ Wc.T


def bicubic_upsample(img, scale):
    img = as_image(img)
    return imresize(img, (img.shape[0] * scale, img.shape[1] * scale))
