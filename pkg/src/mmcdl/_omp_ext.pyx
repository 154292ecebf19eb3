# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled orthogonal matching pursuit kernel.

Same contract as :func:`mmcdl._omp_py.omp_batch`; see that module for the
argument description. Signals are coded independently, so the OpenMP loop
over columns gives results that do not depend on the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
from libc.math cimport sqrt, fabs
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemv

cnp.import_array()

cdef enum:
    STATUS_OK = 0
    STATUS_TRUNCATED = 1
    STATUS_NO_ATOM = 2


cdef int _code_masked(
    const double[:, ::1] Dt,
    const double[:, ::1] A0,
    const double[:, ::1] NRM,
    const double[::1] x2_in,
    const unsigned char[:, ::1] Mt,
    Py_ssize_t i,
    Py_ssize_t max_atoms,
    double tol,
    double min_norm,
    double singular_tol,
    double corr_tol,
    long long[:, ::1] support,
    double[:, ::1] coefs,
    long long[::1] counts,
    double[::1] rnorm2_out,
    double* alpha,
    double* Gs,
    Py_ssize_t* obs,
    double* mb,
    double* L,
    double* b,
    double* w,
    double* gam,
    unsigned char* chosen,
) noexcept nogil:
    cdef Py_ssize_t n_atoms = Dt.shape[0]
    cdef Py_ssize_t d = Dt.shape[1]
    cdef Py_ssize_t j, row, q, t, u, k, best, n_obs, n_usable, limit
    cdef double acc, best_abs, x2, rn2, gjj, delta, db
    cdef int status = STATUS_OK
    cdef double* gcol
    cdef char trans = b'T'
    cdef int bl_m = <int> d
    cdef int bl_n = <int> n_atoms
    cdef int inc = 1
    cdef double one = 1.0
    cdef double zero = 0.0

    n_obs = 0
    for row in range(d):
        if Mt[i, row]:
            obs[n_obs] = row
            n_obs += 1
    n_usable = 0
    for j in range(n_atoms):
        alpha[j] = A0[i, j]
        if NRM[i, j] >= min_norm:
            chosen[j] = 0
            n_usable += 1
        else:
            chosen[j] = 1
    x2 = x2_in[i]
    if n_usable == 0:
        counts[i] = 0
        rnorm2_out[i] = x2
        return STATUS_NO_ATOM

    limit = max_atoms
    if limit > n_usable:
        limit = n_usable
    if limit > n_obs:
        limit = n_obs
    rn2 = x2
    k = 0
    while k < limit:
        if rn2 <= tol:
            break
        best = -1
        best_abs = -1.0
        for j in range(n_atoms):
            if chosen[j]:
                continue
            acc = fabs(alpha[j]) / NRM[i, j]
            if acc > best_abs:
                best_abs = acc
                best = j
        if best < 0 or best_abs * best_abs <= corr_tol * x2:
            break
        # masked Gram column of the candidate atom: D^T (m * d_best)
        gcol = Gs + k * n_atoms
        for row in range(d):
            mb[row] = 0.0
        for q in range(n_obs):
            row = obs[q]
            mb[row] = Dt[best, row]
        dgemv(&trans, &bl_m, &bl_n, &one, <double*> &Dt[0, 0], &bl_m,
              mb, &inc, &zero, gcol, &inc)
        for t in range(k):
            acc = gcol[support[i, t]]
            for u in range(t):
                acc = acc - L[t * limit + u] * w[u]
            w[t] = acc / L[t * limit + t]
        gjj = gcol[best]
        delta = gjj
        for t in range(k):
            delta = delta - w[t] * w[t]
        if delta <= singular_tol * gjj:
            status = STATUS_TRUNCATED
            break
        for t in range(k):
            L[k * limit + t] = w[t]
        L[k * limit + k] = sqrt(delta)
        support[i, k] = best
        chosen[best] = 1
        b[k] = A0[i, best]
        k += 1
        for t in range(k):
            acc = b[t]
            for u in range(t):
                acc = acc - L[t * limit + u] * w[u]
            w[t] = acc / L[t * limit + t]
        for t in range(k - 1, -1, -1):
            acc = w[t]
            for u in range(t + 1, k):
                acc = acc - L[u * limit + t] * gam[u]
            gam[t] = acc / L[t * limit + t]
        for j in range(n_atoms):
            acc = A0[i, j]
            for t in range(k):
                acc = acc - Gs[t * n_atoms + j] * gam[t]
            alpha[j] = acc
        acc = 0.0
        for t in range(k):
            acc = acc + gam[t] * b[t]
        rn2 = x2 - acc
        if rn2 < 0.0:
            rn2 = 0.0

    for t in range(k):
        coefs[i, t] = gam[t]
    counts[i] = k
    rnorm2_out[i] = rn2
    return status


cdef int _code_gram(
    const double[:, ::1] G,
    const double[:, ::1] A0,
    const double[::1] x2_in,
    const double[::1] nrm,
    Py_ssize_t i,
    Py_ssize_t limit,
    double tol,
    double singular_tol,
    double corr_tol,
    long long[:, ::1] support,
    double[:, ::1] coefs,
    long long[::1] counts,
    double[::1] rnorm2_out,
    double* alpha,
    double* L,
    double* b,
    double* w,
    double* gam,
    unsigned char* chosen,
    const unsigned char[::1] usable,
) noexcept nogil:
    cdef Py_ssize_t n_atoms = G.shape[0]
    cdef Py_ssize_t j, t, u, k, best
    cdef double acc, best_abs, x2, rn2, gjj, delta
    cdef int status = STATUS_OK

    for j in range(n_atoms):
        alpha[j] = A0[i, j]
        chosen[j] = 0 if usable[j] else 1
    x2 = x2_in[i]
    rn2 = x2
    k = 0
    while k < limit:
        if rn2 <= tol:
            break
        best = -1
        best_abs = -1.0
        for j in range(n_atoms):
            if chosen[j]:
                continue
            acc = fabs(alpha[j]) / nrm[j]
            if acc > best_abs:
                best_abs = acc
                best = j
        if best < 0 or best_abs * best_abs <= corr_tol * x2:
            break
        for t in range(k):
            acc = G[support[i, t], best]
            for u in range(t):
                acc = acc - L[t * limit + u] * w[u]
            w[t] = acc / L[t * limit + t]
        gjj = G[best, best]
        delta = gjj
        for t in range(k):
            delta = delta - w[t] * w[t]
        if delta <= singular_tol * gjj:
            status = STATUS_TRUNCATED
            break
        for t in range(k):
            L[k * limit + t] = w[t]
        L[k * limit + k] = sqrt(delta)
        support[i, k] = best
        chosen[best] = 1
        b[k] = A0[i, best]
        k += 1
        for t in range(k):
            acc = b[t]
            for u in range(t):
                acc = acc - L[t * limit + u] * w[u]
            w[t] = acc / L[t * limit + t]
        for t in range(k - 1, -1, -1):
            acc = w[t]
            for u in range(t + 1, k):
                acc = acc - L[u * limit + t] * gam[u]
            gam[t] = acc / L[t * limit + t]
        # alpha = A0 - G[:, sel] gam ; rn2 = x2 - gam . b
        for j in range(n_atoms):
            acc = A0[i, j]
            for t in range(k):
                acc = acc - G[j, support[i, t]] * gam[t]
            alpha[j] = acc
        acc = 0.0
        for t in range(k):
            acc = acc + gam[t] * b[t]
        rn2 = x2 - acc
        if rn2 < 0.0:
            rn2 = 0.0

    for t in range(k):
        coefs[i, t] = gam[t]
    counts[i] = k
    rnorm2_out[i] = rn2
    return status


def omp_batch(D, X, Py_ssize_t max_atoms, double tol, mask=None, int threads=1,
              double min_norm=1e-8, double singular_tol=1e-10,
              double corr_tol=1e-24):
    cdef const double[:, ::1] Dt = np.ascontiguousarray(np.asarray(D, dtype=np.float64).T)
    cdef const double[:, ::1] Xt = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
    cdef Py_ssize_t n_atoms = Dt.shape[0]
    cdef Py_ssize_t d = Dt.shape[1]
    cdef Py_ssize_t P = Xt.shape[0]
    cdef bint use_mask = mask is not None
    cdef const unsigned char[:, ::1] Mt
    if use_mask:
        Mt = np.ascontiguousarray(np.asarray(mask, dtype=bool).T).view(np.uint8)
    else:
        Mt = np.zeros((1, 1), dtype=np.uint8)
    if Xt.shape[1] != d and P > 0:
        raise ValueError("signal length does not match dictionary rows")
    if max_atoms < 0:
        raise ValueError("max_atoms must be nonnegative")
    cdef Py_ssize_t width = max_atoms if max_atoms > 0 else 1
    support_arr = np.full((P, width), -1, dtype=np.int64)
    coefs_arr = np.zeros((P, width), dtype=np.float64)
    counts_arr = np.zeros(P, dtype=np.int64)
    rnorm_arr = np.zeros(P, dtype=np.float64)
    status_arr = np.zeros(P, dtype=np.int32)
    cdef long long[:, ::1] support = support_arr
    cdef double[:, ::1] coefs = coefs_arr
    cdef long long[::1] counts = counts_arr
    cdef double[::1] rnorm2 = rnorm_arr
    cdef int[::1] status = status_arr
    cdef Py_ssize_t i
    cdef double* L
    cdef double* b
    cdef double* w
    cdef double* gam
    cdef unsigned char* chosen
    if threads < 1:
        threads = 1
    if P == 0:
        return support_arr, coefs_arr, counts_arr, rnorm_arr, status_arr
    if not use_mask:
        _gram_batch(D, X, max_atoms, tol, threads, min_norm, singular_tol,
                    corr_tol, support, coefs, counts, rnorm2, status, width)
        return support_arr, coefs_arr, counts_arr, rnorm_arr, status_arr
    Dm = np.asarray(D, dtype=np.float64)
    Mf = np.asarray(mask, dtype=np.float64)
    Xm = np.asarray(X, dtype=np.float64) * Mf
    cdef const double[:, ::1] A0 = np.ascontiguousarray((Dm.T @ Xm).T)
    cdef const double[:, ::1] NRM = np.ascontiguousarray(np.sqrt((Dm * Dm).T @ Mf).T)
    cdef const double[::1] x2 = np.ascontiguousarray(np.einsum("ij,ij->j", Xm, Xm))
    cdef double* alpha
    cdef double* Gs
    cdef Py_ssize_t* obs
    cdef double* mb
    with nogil, parallel(num_threads=threads):
        alpha = <double*> malloc(n_atoms * sizeof(double))
        Gs = <double*> malloc(width * n_atoms * sizeof(double))
        obs = <Py_ssize_t*> malloc(d * sizeof(Py_ssize_t))
        mb = <double*> malloc(d * sizeof(double))
        L = <double*> malloc(width * width * sizeof(double))
        b = <double*> malloc(width * sizeof(double))
        w = <double*> malloc(width * sizeof(double))
        gam = <double*> malloc(width * sizeof(double))
        chosen = <unsigned char*> malloc(n_atoms * sizeof(unsigned char))
        for i in prange(P, schedule="static"):
            status[i] = _code_masked(Dt, A0, NRM, x2, Mt, i, max_atoms, tol,
                                     min_norm, singular_tol, corr_tol,
                                     support, coefs, counts, rnorm2,
                                     alpha, Gs, obs, mb, L, b, w, gam, chosen)
        free(alpha)
        free(Gs)
        free(obs)
        free(mb)
        free(L)
        free(b)
        free(w)
        free(gam)
        free(chosen)
    return support_arr, coefs_arr, counts_arr, rnorm_arr, status_arr


cdef _gram_batch(D, X, Py_ssize_t max_atoms, double tol, int threads,
                 double min_norm, double singular_tol, double corr_tol,
                 long long[:, ::1] support, double[:, ::1] coefs,
                 long long[::1] counts, double[::1] rnorm2, int[::1] status,
                 Py_ssize_t width):
    D = np.asarray(D, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    cdef const double[:, ::1] G = np.ascontiguousarray(D.T @ D)
    cdef const double[:, ::1] A0 = np.ascontiguousarray((D.T @ X).T)
    cdef const double[::1] x2 = np.ascontiguousarray(np.einsum("ij,ij->j", X, X))
    nrm_arr = np.sqrt(np.diag(D.T @ D))
    usable_arr = (nrm_arr >= min_norm).astype(np.uint8)
    cdef const double[::1] nrm = np.where(usable_arr, nrm_arr, 1.0)
    cdef const unsigned char[::1] usable = usable_arr
    cdef Py_ssize_t n_atoms = G.shape[0]
    cdef Py_ssize_t n_usable = int(usable_arr.sum())
    cdef Py_ssize_t d = D.shape[0]
    cdef Py_ssize_t P = A0.shape[0]
    cdef Py_ssize_t limit = min(max_atoms, n_usable, d)
    cdef Py_ssize_t i
    cdef double* alpha
    cdef double* L
    cdef double* b
    cdef double* w
    cdef double* gam
    cdef unsigned char* chosen
    if n_usable == 0:
        for i in range(P):
            status[i] = STATUS_NO_ATOM
            rnorm2[i] = x2[i]
        return
    with nogil, parallel(num_threads=threads):
        alpha = <double*> malloc(n_atoms * sizeof(double))
        L = <double*> malloc(width * width * sizeof(double))
        b = <double*> malloc(width * sizeof(double))
        w = <double*> malloc(width * sizeof(double))
        gam = <double*> malloc(width * sizeof(double))
        chosen = <unsigned char*> malloc(n_atoms * sizeof(unsigned char))
        for i in prange(P, schedule="static"):
            status[i] = _code_gram(G, A0, x2, nrm, i, limit, tol,
                                   singular_tol, corr_tol, support, coefs,
                                   counts, rnorm2, alpha, L, b, w, gam,
                                   chosen, usable)
        free(alpha)
        free(L)
        free(b)
        free(w)
        free(gam)
        free(chosen)
