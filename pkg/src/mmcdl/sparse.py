"""Greedy sparse coding over stacked coupled dictionaries.

:func:`omp` and :func:`masked_omp` code a single signal; :func:`batch_code`
and :func:`code_columns` code many columns at once through the kernel
selected in :mod:`mmcdl.kernels`.
"""

from dataclasses import dataclass, field

import numpy as np

from mmcdl import kernels
from mmcdl.errors import DegenerateAtomError, DimensionError, NoUsableAtomError

UNIT_TOL = 1e-10


@dataclass(frozen=True)
class BlockLayout:
    """Row blocks (one per modality) and the size of each column group.

    Columns are grouped as ``[common | target-specific | guidance-specific]``,
    each group holding ``group_size`` atoms.
    """

    group_size: int
    row_blocks: tuple = ()

    def groups(self):
        K = self.group_size
        return {"z": slice(0, K), "u": slice(K, 2 * K), "v": slice(2 * K, 3 * K)}


@dataclass
class StackedDictionary:
    atoms: np.ndarray
    column_norms: np.ndarray | None = None
    block_layout: BlockLayout | None = None

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2:
            raise DimensionError("atoms must be a d x L matrix")
        if self.column_norms is None:
            self.column_norms = np.ones(self.atoms.shape[1])

    @property
    def shape(self):
        return self.atoms.shape

    def is_normalized(self, tol=UNIT_TOL):
        return bool(np.all(np.abs(np.linalg.norm(self.atoms, axis=0) - 1) <= tol))


def normalize(sd):
    """Scale every atom to unit norm, accumulating the removed norms.

    Raises :class:`DegenerateAtomError` on an all-zero column.
    """
    norms = np.linalg.norm(sd.atoms, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateAtomError(f"zero atom(s) at column(s) {zero.tolist()}")
    return StackedDictionary(sd.atoms / norms, sd.column_norms * norms, sd.block_layout)


@dataclass(frozen=True)
class StopRule:
    """Stop at ``max_sparsity`` atoms or once ``||r||^2 <= residual_tol``."""

    max_sparsity: int | None = None
    residual_tol: float | None = None

    def __post_init__(self):
        if self.max_sparsity is None and not self.residual_tol:
            raise ValueError("StopRule needs max_sparsity or a positive residual_tol")
        if self.max_sparsity is not None and self.max_sparsity < 0:
            raise ValueError("max_sparsity must be nonnegative")
        if self.residual_tol is not None and self.residual_tol < 0:
            raise ValueError("residual_tol must be nonnegative")

    def budget(self, n_atoms, n_rows):
        cap = min(n_atoms, n_rows)
        return cap if self.max_sparsity is None else min(self.max_sparsity, cap)

    @property
    def tol(self):
        return float(self.residual_tol or 0.0)


@dataclass
class SparseCodeTriple:
    """One signal's code split into common (z) and specific (u, v) parts.

    ``values`` are expressed against the un-normalized dictionary and follow
    the selection order in ``support``.
    """

    support: tuple
    values: np.ndarray
    n_atoms: int
    group_size: int | None = None
    residual_norm2: float = 0.0
    truncated: bool = False
    _dense: np.ndarray | None = field(default=None, repr=False)

    @property
    def coef(self):
        if self._dense is None:
            a = np.zeros(self.n_atoms)
            a[list(self.support)] = self.values
            self._dense = a
        return self._dense

    def _group(self, which):
        K = self.group_size
        if K is None:
            return self.coef if which == 0 else np.zeros(0)
        return self.coef[which * K:(which + 1) * K]

    @property
    def z(self):
        return self._group(0)

    @property
    def u(self):
        return self._group(1)

    @property
    def v(self):
        return self._group(2)

    @property
    def nnz(self):
        return len(self.support)


@dataclass
class CodeBatch:
    """Raw kernel output for ``P`` signals (see :func:`mmcdl._omp_py.omp_batch`)."""

    support: np.ndarray
    coefs: np.ndarray
    counts: np.ndarray
    residual_norm2: np.ndarray
    status: np.ndarray

    def dense(self, n_atoms, scale=None):
        """Codes as an ``n_atoms x P`` matrix; ``scale`` divides each row."""
        P = self.counts.shape[0]
        A = np.zeros((n_atoms, P))
        valid = self.support >= 0
        cols = np.broadcast_to(np.arange(P)[:, None], self.support.shape)
        A[self.support[valid], cols[valid]] = self.coefs[valid]
        if scale is not None:
            A /= np.asarray(scale)[:, None]
        return A


def code_columns(atoms, signals, stop, mask=None, threads=1, backend=None):
    """Code every column of ``signals`` against ``atoms``.

    Coefficients come back against ``atoms`` exactly as passed; atoms need
    not be unit-norm since selection divides correlations by the (masked)
    column norm.
    """
    atoms = np.asarray(atoms, dtype=np.float64)
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2 or (signals.shape[1] and signals.shape[0] != atoms.shape[0]):
        raise DimensionError(
            f"signals of shape {signals.shape} do not fit a dictionary with "
            f"{atoms.shape[0]} rows")
    budget = stop.budget(atoms.shape[1], atoms.shape[0])
    out = kernels.omp_batch(atoms, signals, budget, stop.tol, mask=mask,
                            threads=threads, backend=backend)
    batch = CodeBatch(*out)
    bad = np.flatnonzero(batch.status == kernels.STATUS_NO_ATOM)
    if bad.size:
        raise NoUsableAtomError(
            f"column {int(bad[0])}: every atom vanishes on the observed rows",
            column=int(bad[0]))
    return batch


def _require_normalized(sd):
    if not sd.is_normalized():
        raise ValueError("dictionary must be normalized first (see normalize())")


def _to_triples(batch, sd):
    K = sd.block_layout.group_size if sd.block_layout else None
    L = sd.atoms.shape[1]
    out = []
    for i in range(batch.counts.shape[0]):
        k = int(batch.counts[i])
        sup = tuple(int(j) for j in batch.support[i, :k])
        vals = batch.coefs[i, :k] / sd.column_norms[list(sup)]
        out.append(SparseCodeTriple(sup, vals, L, K, float(batch.residual_norm2[i]),
                                    bool(batch.status[i] == kernels.STATUS_TRUNCATED)))
    return out


def omp(signal, sd, stop, backend=None):
    """Orthogonal matching pursuit for one signal.

    Atom choice is the largest absolute correlation with the residual (lowest
    index on ties), followed by a least-squares refit on the support through
    an incrementally updated Cholesky factor of the support Gram matrix. A
    near-singular update drops the candidate and ends the pursuit, which is
    reported through ``truncated``.
    """
    _require_normalized(sd)
    x = np.asarray(signal, dtype=np.float64).reshape(-1, 1)
    batch = code_columns(sd.atoms, x, stop, backend=backend)
    return _to_triples(batch, sd)[0]


def masked_omp(signal, sd, mask_rows, stop, backend=None):
    """OMP restricted to the observed rows ``mask_rows``.

    ``signal`` holds one entry per kept row (in increasing row order).
    Restricted atoms are re-normalized for selection; atoms whose restriction
    has norm below 1e-8 are never chosen. The returned coefficients apply to
    the full, unmasked dictionary.
    """
    _require_normalized(sd)
    d = sd.atoms.shape[0]
    rows = np.unique(np.asarray(list(mask_rows), dtype=np.int64))
    if rows.size == 0:
        raise ValueError("mask_rows must not be empty")
    if rows[0] < 0 or rows[-1] >= d:
        raise DimensionError("mask row index out of range")
    sig = np.asarray(signal, dtype=np.float64).ravel()
    if sig.size != rows.size:
        raise DimensionError(f"signal has {sig.size} entries for {rows.size} kept rows")
    full = np.zeros((d, 1))
    full[rows, 0] = sig
    mask = np.zeros((d, 1), dtype=bool)
    mask[rows, 0] = True
    batch = code_columns(sd.atoms, full, stop, mask=mask, backend=backend)
    return _to_triples(batch, sd)[0]


def batch_code(signals, sd, stop, masks=None, threads=1, backend=None):
    """Code each column independently; ``masks`` (d x P bool) selects masked mode."""
    _require_normalized(sd)
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim == 1:
        signals = signals.reshape(-1, 1)
    if signals.shape[1] == 0:
        return []
    batch = code_columns(sd.atoms, signals, stop, mask=masks, threads=threads,
                         backend=backend)
    return _to_triples(batch, sd)


def mutual_coherence(atoms):
    D = np.asarray(atoms, dtype=np.float64)
    D = D / np.linalg.norm(D, axis=0)
    G = np.abs(D.T @ D)
    np.fill_diagonal(G, 0.0)
    return float(G.max()) if G.size > 1 else 0.0
