"""Synthetic coupled data with known ground truth.

Planted dictionaries follow the coupled block structure exactly, and images
are tiled from patches that are exactly sparse in them, so every stage of a
pipeline can be checked against the generator.
"""

import numpy as np

from mmcdl.core import PatchGeometry, bicubic_upsample, imresize
from mmcdl.dictlearn import DENOISE, SUPERRES, CoupledDictionary, check_layout, structural_mask
from mmcdl.sparse import mutual_coherence


def _orthonormal(n, k, rng, first=None):
    """``k`` orthonormal columns in R^n, optionally starting with ``first``."""
    G = rng.standard_normal((n, k))
    if first is not None:
        G[:, 0] = first
    Q, R = np.linalg.qr(G)
    Q = Q * np.sign(np.diag(R))
    return Q


def lr_patch_operator(patch_side, scale):
    """Patch-level degrade-then-upsample map (``n x n``), symmetric boundaries."""
    p = patch_side
    if p % scale:
        raise ValueError(f"patch side {p} is not divisible by scale {scale}")
    down = imresize_matrix(p, p // scale)
    up = imresize_matrix(p // scale, p)
    B1 = up @ down
    return np.kron(B1, B1)


def imresize_matrix(n_in, n_out):
    from mmcdl.core import resize_matrix
    return resize_matrix(n_in, n_out)


def planted_dictionary(layout=DENOISE, patch_side=4, K=8, seed=0, coherence=0.15,
                       dc_atoms=False, scale=2, sparsity=None):
    """Random coupled dictionary with bounded mutual coherence.

    Target and guidance rows each start from an orthonormal basis split
    between the common and specific atoms, which makes every stacked column
    orthogonal; a random perturbation is then blended in and scaled down
    until the stacked mutual coherence is at most ``coherence``. With
    ``dc_atoms`` the first target-specific and guidance-specific atoms are
    constant patches.

    For ``"superres"`` the low-resolution blocks are the high-resolution
    blocks passed through :func:`lr_patch_operator`.
    """
    check_layout(layout)
    n = patch_side * patch_side
    if 2 * K > n:
        raise ValueError(f"need 2K <= n for a coherence-controlled dictionary (K={K}, n={n})")
    rng = np.random.default_rng(seed)
    const = np.full(n, 1.0 / np.sqrt(n))
    Qx = _orthonormal(n, 2 * K, rng, const if dc_atoms else None)
    Qy = _orthonormal(n, 2 * K, rng, const if dc_atoms else None)
    # specific atoms take columns 0..K-1 (so the constant lands in psi/phi)
    base = {
        "psi": Qx[:, :K], "psi_c": Qx[:, K:] / np.sqrt(2),
        "phi": Qy[:, :K], "phi_c": Qy[:, K:] / np.sqrt(2),
    }
    noise = {k: rng.standard_normal((n, K)) / np.sqrt(n) for k in base}
    if dc_atoms:
        noise["psi"][:, 0] = 0.0
        noise["phi"][:, 0] = 0.0

    def build(t):
        blocks = {k: base[k] + t * noise[k] for k in base}
        cd = CoupledDictionary(DENOISE, K, patch_side, blocks)
        D = cd.stacked()
        D /= np.linalg.norm(D, axis=0)
        return CoupledDictionary.from_stacked(DENOISE, D, patch_side)

    t = 1.0
    cd = build(t)
    if coherence is not None:
        while mutual_coherence(cd.stacked()) > coherence and t > 1e-6:
            t *= 0.8
            cd = build(t)
    prov = {"planted": True, "seed": seed, "remove_dc": False,
            "coherence": mutual_coherence(cd.stacked())}
    if sparsity is not None:
        prov["sparsity"] = int(sparsity)
    if layout == DENOISE:
        cd.provenance = prov
        return cd
    B = lr_patch_operator(patch_side, scale)
    b = cd.blocks
    blocks = {"psi_c_h": b["psi_c"], "psi_h": b["psi"],
              "psi_c_l": B @ b["psi_c"], "psi_l": B @ b["psi"],
              "phi_c": b["phi_c"], "phi": b["phi"]}
    sr = CoupledDictionary(SUPERRES, K, patch_side, blocks)
    D = sr.stacked()
    D /= np.linalg.norm(D, axis=0)
    prov["scale"] = scale
    return CoupledDictionary.from_stacked(SUPERRES, D, patch_side, prov)


def planted_codes(K, P, s, seed=0, amplitude=(0.5, 1.5), dc=None, target_specific=True):
    """Random ``3K x P`` code matrix with exactly ``s`` nonzeros per column.

    With ``dc=(lo, hi, n)`` columns 0 and ``2K`` of the specific groups carry
    a DC level drawn from ``[lo, hi]`` (scaled by ``sqrt(n)`` for unit
    constant atoms) and count towards ``s``; the remaining atoms are drawn
    from the other columns. ``target_specific=False`` keeps the non-DC
    target-specific atoms out of the codes, so all target detail is shared
    with the guidance.
    """
    rng = np.random.default_rng(seed)
    L = 3 * K
    A = np.zeros((L, P))
    pool = np.arange(L)
    n_struct = s
    if dc is not None:
        lo, hi, n = dc
        dc_cols = np.array([K, 2 * K])
        pool = np.setdiff1d(pool, dc_cols)
        n_struct = s - 2
        if n_struct < 0:
            raise ValueError("sparsity must be at least 2 when DC atoms are used")
        A[K] = rng.uniform(lo, hi, P) * np.sqrt(n)
        A[2 * K] = rng.uniform(lo, hi, P) * np.sqrt(n)
    if not target_specific:
        pool = np.setdiff1d(pool, np.arange(K, 2 * K))
    lo_a, hi_a = amplitude
    for i in range(P):
        sup = rng.choice(pool, size=n_struct, replace=False)
        A[sup, i] = rng.choice([-1.0, 1.0], n_struct) * rng.uniform(lo_a, hi_a, n_struct)
    return A


def planted_signals(cd, A):
    return cd.stacked() @ A


def tile_image(patches, tiles_h, tiles_w, patch_side):
    """Assemble non-overlapping patches (columns, row-major tiles) into an image."""
    p = patch_side
    blocks = patches.T.reshape(tiles_h, tiles_w, p, p)
    return blocks.transpose(0, 2, 1, 3).reshape(tiles_h * p, tiles_w * p)


def synth_coupled_pair(cd, tiles_h, tiles_w, s, seed=0, amplitude=(0.25, 0.6),
                       dc_range=(0.35, 0.65), target_specific=True):
    """Target/guidance images whose tile-aligned patches are exactly s-sparse.

    Returns a dict with ``target`` (the clean target; high-resolution rows
    for a super-resolution dictionary), ``guidance``, ``codes`` and the tile
    ``geometry`` (stride equal to the patch side).
    """
    p = cd.patch_side
    P = tiles_h * tiles_w
    has_dc = _has_dc_atoms(cd)
    dc = (dc_range[0], dc_range[1], cd.n) if has_dc else None
    A = planted_codes(cd.K, P, s, seed=seed, amplitude=amplitude, dc=dc,
                      target_specific=target_specific)
    X = planted_signals(cd, A)
    tgt = X[cd.row_slice(cd.target_rows())]
    gde = X[cd.row_slice("y")]
    target = tile_image(tgt, tiles_h, tiles_w, p)
    guidance = tile_image(gde, tiles_h, tiles_w, p)
    geom = PatchGeometry(p, p, *target.shape)
    return {"target": target, "guidance": guidance, "codes": A, "geometry": geom}


def _has_dc_atoms(cd):
    D = cd.stacked()
    K = cd.K
    t = D[cd.row_slice(cd.target_rows()), K]
    g = D[cd.row_slice("y"), 2 * K]
    return bool(np.allclose(t, t[0]) and np.allclose(g, g[0]) and abs(t[0]) > 0)


def coupled_training_images(cd, tiles_h, tiles_w, s, seed=0, **kw):
    """Same generator as :func:`synth_coupled_pair`, returned as (target, guidance)."""
    out = synth_coupled_pair(cd, tiles_h, tiles_w, s, seed=seed, **kw)
    return out["target"], out["guidance"]


def upsampled_lr(hr, scale):
    """Upsampled low-resolution version of ``hr`` on the high-resolution grid."""
    from mmcdl.tasks import degrade_for_sr
    lr = degrade_for_sr(hr, scale)
    return bicubic_upsample(lr, scale), lr


__all__ = [
    "planted_dictionary", "planted_codes", "planted_signals", "tile_image",
    "synth_coupled_pair", "lr_patch_operator", "coupled_training_images",
    "upsampled_lr", "structural_mask", "imresize",
]
