"""Pure NumPy orthogonal matching pursuit kernel.

Reference implementation of the batch OMP kernel; the compiled twin in
``_omp_ext.pyx`` follows the same steps signal by signal. Signals are
processed in fixed-size chunks, vectorized across the chunk, so the result
for a column never depends on how many threads share the work.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

STATUS_OK = 0
STATUS_TRUNCATED = 1
STATUS_NO_ATOM = 2

CHUNK = 1024


def omp_batch(D, X, max_atoms, tol, mask=None, threads=1,
              min_norm=1e-8, singular_tol=1e-10, corr_tol=1e-24):
    """Code every column of ``X`` against ``D`` by OMP.

    Parameters
    ----------
    D : (d, L) array
        Dictionary. Columns need not be normalized; atom selection uses
        correlations divided by the (masked) column norm.
    X : (d, P) array
        Signals, one per column.
    max_atoms : int
        Upper bound on the support size.
    tol : float
        Stop once the squared residual norm is ``<= tol``.
    mask : (d, P) bool array, optional
        Observed rows per signal. Unobserved rows are ignored both in the
        signal and in the dictionary.
    threads : int
        Worker threads; chunks are distributed over them.

    Returns
    -------
    support : (P, w) int64 array
        Selected atoms in selection order, padded with -1.
    coefs : (P, w) float64 array
        Least-squares coefficients against the columns of ``D`` as given.
    counts : (P,) int64 array
    rnorm2 : (P,) float64 array
        Final squared residual norm.
    status : (P,) int32 array
        0 ok, 1 stopped on a singular Gram update, 2 no usable atom.
    """
    D = np.asarray(D, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    d, n_atoms = D.shape
    P = X.shape[1]
    if P and X.shape[0] != d:
        raise ValueError("signal length does not match dictionary rows")
    if max_atoms < 0:
        raise ValueError("max_atoms must be nonnegative")
    width = max(max_atoms, 1)
    out = (
        np.full((P, width), -1, dtype=np.int64),
        np.zeros((P, width)),
        np.zeros(P, dtype=np.int64),
        np.zeros(P),
        np.zeros(P, dtype=np.int32),
    )
    if P == 0:
        return out
    M = None if mask is None else np.asarray(mask, dtype=bool)
    G = D.T @ D if M is None else None

    def run(start):
        stop = min(start + CHUNK, P)
        if M is None:
            res = _code_chunk_gram(D, G, X[:, start:stop], max_atoms, tol,
                                   min_norm, singular_tol, corr_tol)
        else:
            res = _code_chunk(D, X[:, start:stop], M[:, start:stop], max_atoms,
                              tol, min_norm, singular_tol, corr_tol)
        for dst, src in zip(out, res):
            dst[start:stop] = src

    starts = range(0, P, CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)
    return out


def _code_chunk_gram(D, G, X, max_atoms, tol, min_norm, singular_tol, corr_tol):
    """Unmasked chunk: correlations are updated through the Gram matrix."""
    d, n_atoms = D.shape
    P = X.shape[1]
    width = max(max_atoms, 1)
    nrm = np.sqrt(np.diag(G))
    usable = nrm >= min_norm
    safe_nrm = np.where(usable, nrm, 1.0)
    limit = min(max_atoms, int(usable.sum()), d)
    A0 = D.T @ X
    x2 = np.einsum("ij,ij->j", X, X)

    support = np.full((P, width), -1, dtype=np.int64)
    coefs = np.zeros((P, width))
    counts = np.zeros(P, dtype=np.int64)
    status = np.full(P, STATUS_OK if usable.any() else STATUS_NO_ATOM, dtype=np.int32)
    chosen = np.broadcast_to(~usable[:, None], (n_atoms, P)).copy()
    L = np.zeros((P, width, width))
    b = np.zeros((P, width))
    gam = np.zeros((P, width))
    alpha = A0.copy()
    rn2 = x2.copy()
    active = np.full(P, usable.any())
    cols = np.arange(P)

    for k in range(limit):
        active &= rn2 > tol
        if not active.any():
            break
        idx = cols[active]
        corr = np.abs(alpha[:, idx]) / safe_nrm[:, None]
        corr[chosen[:, idx]] = -1.0
        best = np.argmax(corr, axis=0)
        best_abs = corr[best, np.arange(idx.size)]
        ok = (best_abs >= 0) & (best_abs * best_abs > corr_tol * x2[idx])
        active[idx[~ok]] = False
        idx, best = idx[ok], best[ok]
        if idx.size == 0:
            break
        sel = support[idx, :k]
        if k:
            g = G[sel, best[:, None]]
            w = _forward(L[idx, :k, :k], g)
        else:
            w = np.zeros((idx.size, 0))
        gjj = G[best, best]
        delta = gjj - np.einsum("pk,pk->p", w, w)
        sing = delta <= singular_tol * gjj
        status[idx[sing]] = STATUS_TRUNCATED
        active[idx[sing]] = False
        keep = ~sing
        idx, best, w, delta = idx[keep], best[keep], w[keep], delta[keep]
        if idx.size == 0:
            break
        L[idx, k, :k] = w
        L[idx, k, k] = np.sqrt(delta)
        support[idx, k] = best
        chosen[best, idx] = True
        b[idx, k] = A0[best, idx]
        counts[idx] = k + 1
        Lk = L[idx, :k + 1, :k + 1]
        g_new = _backward(Lk, _forward(Lk, b[idx, :k + 1]))
        gam[idx, :k + 1] = g_new
        Gsel = G[:, support[idx, :k + 1]]  # (L, p, k)
        alpha[:, idx] = A0[:, idx] - np.einsum("lpk,pk->lp", Gsel, g_new)
        rn2[idx] = np.maximum(x2[idx] - np.einsum("pk,pk->p", g_new, b[idx, :k + 1]), 0.0)

    k_max = counts.max() if P else 0
    coefs[:, :k_max] = np.where(np.arange(k_max)[None, :] < counts[:, None],
                                gam[:, :k_max], 0.0)
    return support, coefs, counts, rn2, status


def _code_chunk(D, X, M, max_atoms, tol, min_norm, singular_tol, corr_tol):
    d, n_atoms = D.shape
    P = X.shape[1]
    width = max(max_atoms, 1)
    Mf = M.astype(np.float64)
    nrm = np.sqrt((D * D).T @ Mf)
    n_obs = M.sum(axis=0)
    xm = X * Mf
    usable = nrm >= min_norm
    n_usable = usable.sum(axis=0)
    limit = np.minimum(np.minimum(n_usable, n_obs), max_atoms)

    support = np.full((P, width), -1, dtype=np.int64)
    coefs = np.zeros((P, width))
    counts = np.zeros(P, dtype=np.int64)
    status = np.where(n_usable == 0, STATUS_NO_ATOM, STATUS_OK).astype(np.int32)
    chosen = ~usable
    safe_nrm = np.where(usable, nrm, 1.0)

    L = np.zeros((P, width, width))
    b = np.zeros((P, width))
    gam = np.zeros((P, width))
    r = xm.copy()
    x2 = np.einsum("ij,ij->j", xm, xm)
    rn2 = x2.copy()
    active = (n_usable > 0) & (limit > 0)
    cols = np.arange(P)

    for k in range(max_atoms):
        active &= (k < limit) & (rn2 > tol)
        if not active.any():
            break
        idx = cols[active]
        corr = np.abs(D.T @ r[:, idx]) / safe_nrm[:, idx]
        corr[chosen[:, idx]] = -1.0
        best = np.argmax(corr, axis=0)
        best_abs = corr[best, np.arange(idx.size)]
        ok = (best_abs >= 0) & (best_abs * best_abs > corr_tol * x2[idx])
        active[idx[~ok]] = False
        idx, best = idx[ok], best[ok]
        if idx.size == 0:
            break
        mix = Mf[:, idx]
        Dnew = D[:, best] * mix  # (d, p)
        if k:
            Dsel = D[:, support[idx, :k]].transpose(1, 0, 2) * mix.T[:, :, None]  # (p, d, k)
            g = np.einsum("pdk,dp->pk", Dsel, Dnew)
            w = _forward(L[idx, :k, :k], g)
        else:
            w = np.zeros((idx.size, 0))
        gjj = safe_nrm[best, idx] ** 2
        delta = gjj - np.einsum("pk,pk->p", w, w)
        sing = delta <= singular_tol * gjj
        status[idx[sing]] = STATUS_TRUNCATED
        active[idx[sing]] = False
        keep = ~sing
        idx, best, w, delta, Dnew = idx[keep], best[keep], w[keep], delta[keep], Dnew[:, keep]
        if idx.size == 0:
            break
        L[idx, k, :k] = w
        L[idx, k, k] = np.sqrt(delta)
        support[idx, k] = best
        chosen[best, idx] = True
        b[idx, k] = np.einsum("dp,dp->p", Dnew, xm[:, idx])
        counts[idx] = k + 1
        Lk = L[idx, :k + 1, :k + 1]
        y = _forward(Lk, b[idx, :k + 1])
        g_new = _backward(Lk, y)
        gam[idx, :k + 1] = g_new
        Dsel = D[:, support[idx, :k + 1]].transpose(1, 0, 2) * Mf[:, idx].T[:, :, None]
        r[:, idx] = xm[:, idx] - np.einsum("pdk,pk->dp", Dsel, g_new)
        rn2[idx] = np.einsum("dp,dp->p", r[:, idx], r[:, idx])

    k_max = counts.max() if P else 0
    coefs[:, :k_max] = np.where(np.arange(k_max)[None, :] < counts[:, None],
                                gam[:, :k_max], 0.0)
    return support, coefs, counts, rn2, status


def _forward(L, b):
    """Solve ``L y = b`` for a stack of lower-triangular ``L``, row by row."""
    n = L.shape[1]
    y = np.zeros_like(b)
    for t in range(n):
        acc = b[:, t].copy()
        for u in range(t):
            acc -= L[:, t, u] * y[:, u]
        y[:, t] = acc / L[:, t, t]
    return y


def _backward(L, y):
    """Solve ``L^T x = y`` for a stack of lower-triangular ``L``."""
    n = L.shape[1]
    x = np.zeros_like(y)
    for t in range(n - 1, -1, -1):
        acc = y[:, t].copy()
        for u in range(t + 1, n):
            acc -= L[:, u, t] * x[:, u]
        x[:, t] = acc / L[:, t, t]
    return x
