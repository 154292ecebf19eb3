"""Coupled dictionary learning by alternating OMP and block-aware K-SVD.

The stacked dictionary has one row block per modality and three column
groups: common atoms (nonzero in every row block), target-specific atoms
(zero on the guidance rows) and guidance-specific atoms (zero on the target
rows). For the denoising layout::

    [ psi_c  psi   0   ]   rows of the target patch
    [ phi_c   0   phi  ]   rows of the guidance patch

and for the super-resolution layout::

    [ psi_c_h  psi_h   0   ]   high-resolution target
    [ psi_c_l  psi_l   0   ]   (upsampled) low-resolution target
    [ phi_c     0     phi  ]   guidance

The zero blocks are structural: no update may write into them.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from mmcdl.errors import DimensionError, InputError, LayoutError
from mmcdl.sparse import StopRule, code_columns

log = logging.getLogger(__name__)

DENOISE = "denoise"
SUPERRES = "superres"



# per layout: row blocks in order, each as (row name, (z block, u block, v block))
ROW_SPECS = {
    DENOISE: (
        ("x", ("psi_c", "psi", None)),
        ("y", ("phi_c", None, "phi")),
    ),
    SUPERRES: (
        ("x_h", ("psi_c_h", "psi_h", None)),
        ("x_l", ("psi_c_l", "psi_l", None)),
        ("y", ("phi_c", None, "phi")),
    ),
}

BLOCK_ORDER = {
    DENOISE: ("psi_c", "psi", "phi_c", "phi"),
    SUPERRES: ("psi_c_h", "psi_h", "psi_c_l", "psi_l", "phi_c", "phi"),
}


def check_layout(layout):
    if layout not in ROW_SPECS:
        raise LayoutError(f"unknown layout {layout!r}; expected 'denoise' or 'superres'")
    return layout


def structural_mask(layout, n, K):
    """Boolean ``d x 3K`` matrix: True where an entry may be nonzero."""
    spec = ROW_SPECS[check_layout(layout)]
    allowed = np.zeros((len(spec) * n, 3 * K), dtype=bool)
    for b, (_, groups) in enumerate(spec):
        for g, name in enumerate(groups):
            if name is not None:
                allowed[b * n:(b + 1) * n, g * K:(g + 1) * K] = True
    return allowed


@dataclass
class CoupledDictionary:
    layout: str
    K: int
    patch_side: int
    blocks: dict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        check_layout(self.layout)
        n = self.n
        missing = [b for b in BLOCK_ORDER[self.layout] if b not in self.blocks]
        if missing:
            raise LayoutError(f"{self.layout} dictionary lacks blocks {missing}")
        for name in BLOCK_ORDER[self.layout]:
            blk = np.asarray(self.blocks[name], dtype=np.float64)
            if blk.shape != (n, self.K):
                raise DimensionError(f"block {name} has shape {blk.shape}, expected {(n, self.K)}")
            self.blocks[name] = blk

    @property
    def n(self):
        return self.patch_side * self.patch_side

    @property
    def row_names(self):
        return tuple(name for name, _ in ROW_SPECS[self.layout])

    def row_slice(self, name):
        idx = self.row_names.index(name)
        return slice(idx * self.n, (idx + 1) * self.n)

    @property
    def objective_log(self):
        return list(self.provenance.get("objective_log", []))

    def stacked(self):
        n, K = self.n, self.K
        spec = ROW_SPECS[self.layout]
        D = np.zeros((len(spec) * n, 3 * K))
        for b, (_, groups) in enumerate(spec):
            for g, name in enumerate(groups):
                if name is not None:
                    D[b * n:(b + 1) * n, g * K:(g + 1) * K] = self.blocks[name]
        return D

    def rows(self, *names):
        """Stacked dictionary restricted to the given row blocks, in order."""
        D = self.stacked()
        return np.vstack([D[self.row_slice(nm)] for nm in names])

    def target_rows(self):
        """Row block holding the restored target patch."""
        return "x" if self.layout == DENOISE else "x_h"

    def target_estimator(self):
        """``n x 3K`` matrix mapping a code to the target patch.

        Only the common and target-specific groups contribute; guidance
        atoms are zeroed so v never leaks into the estimate.
        """
        M = self.rows(self.target_rows())
        M[:, 2 * self.K:] = 0.0
        return M

    @classmethod
    def from_stacked(cls, layout, D, patch_side, provenance=None):
        check_layout(layout)
        spec = ROW_SPECS[layout]
        n = patch_side * patch_side
        D = np.asarray(D, dtype=np.float64)
        if D.shape[0] != len(spec) * n or D.shape[1] % 3:
            raise DimensionError(f"stacked matrix {D.shape} does not fit layout {layout} with n={n}")
        K = D.shape[1] // 3
        blocks = {}
        for b, (_, groups) in enumerate(spec):
            for g, name in enumerate(groups):
                if name is not None:
                    blocks[name] = D[b * n:(b + 1) * n, g * K:(g + 1) * K].copy()
        return cls(layout, K, patch_side, blocks, dict(provenance or {}))


@dataclass
class TrainConfig:
    K: int = 64
    s: int = 4
    iterations: int = 20
    seed: int = 0
    dead_atom_threshold: int = 1
    residual_tol: float | None = None
    threads: int = 1
    rebalance: bool = True
    rebalance_threshold: float = 0.05
    refit_rounds: int = 10
    stall_ratio: float = 0.5

    def __post_init__(self):
        if self.K < 1 or self.s < 1 or self.iterations < 1:
            raise InputError("K, s and iterations must all be >= 1")
        if self.refit_rounds < 0 or not 0 < self.stall_ratio <= 1:
            raise InputError("refit_rounds must be >= 0 and stall_ratio in (0, 1]")
        if self.s > 3 * self.K:
            raise InputError(f"sparsity {self.s} exceeds the {3 * self.K} available atoms")


def objective(D, A, X):
    """Sum of squared residuals ``sum_i ||x_i - D a_i||^2``."""
    R = np.asarray(X) - np.asarray(D) @ np.asarray(A)
    return float(np.einsum("ij,ij->", R, R))


def _infer_patch_side(layout, d, patch_side):
    blocks = len(ROW_SPECS[check_layout(layout)])
    if d % blocks:
        raise DimensionError(f"{d} rows cannot be split into {blocks} equal blocks")
    n = d // blocks
    if patch_side is None:
        p = int(round(np.sqrt(n)))
        if p * p != n:
            raise DimensionError(f"block height {n} is not a square patch size")
        return p
    if patch_side * patch_side != n:
        raise DimensionError(f"training rows {d} do not match layout {layout} with patch side {patch_side}")
    return patch_side


def _normalize_columns(D, allowed, rng):
    norms = np.linalg.norm(D, axis=0)
    for j in np.flatnonzero(norms < 1e-12):
        D[:, j] = np.where(allowed[:, j], 1e-3 * rng.standard_normal(D.shape[0]), 0.0)
        norms[j] = np.linalg.norm(D[:, j])
    return D / norms


def _init_stacked(X, cfg, layout, n):
    P = X.shape[1]
    L = 3 * cfg.K
    allowed = structural_mask(layout, n, cfg.K)
    rng = np.random.default_rng(cfg.seed)
    # draw from a content-defined column order so the start does not depend
    # on how the training signals happen to be arranged
    canon = np.lexsort(X[::-1])
    if P >= L:
        pick = canon[rng.choice(P, size=L, replace=False)]
        D = X[:, pick].copy()
    else:
        pick = canon[rng.choice(P, size=L, replace=True)]
        D = X[:, pick] + 1e-3 * rng.standard_normal((X.shape[0], L))
    D[~allowed] = 0.0
    return _normalize_columns(D, allowed, rng), allowed


def init_dictionary(training, cfg, layout, patch_side=None):
    """Seeded initial dictionary drawn from the training signals.

    ``3K`` distinct signals are sampled without replacement (from a
    canonical, content-sorted column order) and dealt to the
    common, target-specific and guidance-specific groups in that order. With
    fewer than ``3K`` signals, sampling falls back to replacement plus a
    1e-3 Gaussian jitter.
    """
    X = np.asarray(training, dtype=np.float64)
    p = _infer_patch_side(layout, X.shape[0], patch_side)
    if X.shape[1] == 0:
        raise InputError("empty training set")
    D, _ = _init_stacked(X, cfg, layout, p * p)
    return CoupledDictionary.from_stacked(layout, D, p, {"seed": cfg.seed})


def _sign_fix(atom, coef):
    k = int(np.argmax(np.abs(atom)))
    if atom[k] < 0:
        return -atom, -coef
    return atom, coef


def ksvd_update_atom(j, D, A, E, allowed, X, dead_atom_threshold=1, taken=None):
    """Update atom ``j`` and its coefficients in place.

    ``E`` must hold the current residual ``X - D A`` and is kept in sync.
    The rank-1 fit is computed on the rows atom ``j`` may occupy, which is
    the exact minimizer under the structural-zero constraint; the support
    pattern of ``A`` is left unchanged. Atoms used by fewer than
    ``dead_atom_threshold`` signals, or whose restricted residual vanishes,
    are replaced by the worst-represented training signal (projected on the
    allowed rows and normalized).

    Returns ``"updated"``, ``"replaced"`` or ``"kept"``.
    """
    users = np.flatnonzero(A[j])
    rows = allowed[:, j]
    if users.size >= max(dead_atom_threshold, 1):
        a_old = A[j, users]
        ER = E[:, users] + np.outer(D[:, j], a_old)
        sub = ER[rows]
        if np.any(sub):
            U, S, Vt = np.linalg.svd(sub, full_matrices=False)
            atom = np.zeros(D.shape[0])
            atom[rows] = U[:, 0]
            coef = S[0] * Vt[0]
            atom, coef = _sign_fix(atom, coef)
            D[:, j] = atom
            A[j, users] = coef
            E[:, users] = ER - np.outer(atom, coef)
            return "updated"
        # restricted residual is zero: these signals no longer need atom j
        A[j, users] = 0.0
        E[:, users] = ER
    return _replace_dead(j, D, E, X, rows, taken)


def _replace_dead(j, D, E, X, rows, taken):
    err = np.einsum("ij,ij->j", E, E)
    # worst first; stable so ties go to the lowest index
    for i in np.argsort(-err, kind="stable"):
        if taken is not None and i in taken:
            continue
        cand = np.where(rows, X[:, i], 0.0)
        nrm = np.linalg.norm(cand)
        if nrm > 1e-12:
            D[:, j] = cand / nrm
            if taken is not None:
                taken.add(int(i))
            return "replaced"
    return "kept"


def _iterate(X, D, A, E, allowed, stop, cfg):
    """One alternation (coding, then an atom sweep) on copies of the state."""
    D, A, E = D.copy(), A.copy(), E.copy()
    L = D.shape[1]
    batch = code_columns(D, X, stop, threads=cfg.threads)
    A_new = batch.dense(L)
    E_new = X - D @ A_new
    err_new = np.einsum("ij,ij->j", E_new, E_new)
    err_old = np.einsum("ij,ij->j", E, E)
    take = err_new <= err_old
    A[:, take] = A_new[:, take]
    E[:, take] = E_new[:, take]
    coded = float(err_new.sum())
    taken = set()
    n_dead = 0
    for j in range(L):
        if ksvd_update_atom(j, D, A, E, allowed, X, cfg.dead_atom_threshold, taken) == "replaced":
            n_dead += 1
    E = X - D @ A
    obj = float(np.einsum("ij,ij->", E, E))
    for _ in range(cfg.refit_rounds):
        D2, A2 = refit_dictionary(X, D, A, allowed)
        A2 = refit_codes(X, D2, A2)
        E2 = X - D2 @ A2
        obj2 = float(np.einsum("ij,ij->", E2, E2))
        if not obj2 < obj:
            break
        D, A, E, obj = D2, A2, E2, obj2
    return D, A, E, obj, coded, n_dead


def refit_codes(X, D, A):
    """Least-squares coefficients on each signal's current support."""
    A = A.copy()
    nz = A != 0
    counts = nz.sum(axis=0)
    w = int(counts.max()) if counts.size else 0
    if w == 0:
        return A
    P = A.shape[1]
    # supports padded with -1, in increasing atom order
    order = np.argsort(~nz, axis=0, kind="stable")[:w].T
    valid = np.arange(w)[None, :] < counts[:, None]
    idx = np.where(valid, order, 0)
    Ds = D[:, idx].transpose(1, 0, 2) * valid[:, None, :]
    G = np.einsum("pdk,pdl->pkl", Ds, Ds)
    G[~valid] = 0.0
    G[np.broadcast_to(np.eye(w, dtype=bool), G.shape) & ~valid[:, :, None]] = 1.0
    b = np.einsum("pdk,dp->pk", Ds, X)
    try:
        sol = np.linalg.solve(G, b[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        return A
    cols = np.broadcast_to(np.arange(P)[:, None], idx.shape)
    A[idx[valid], cols[valid]] = sol[valid]
    return A


def refit_dictionary(X, D, A, allowed):
    """Least-squares refit of all atoms at once for fixed codes.

    Each dictionary row is solved over the columns it may occupy, so the
    structural zeros stay exact. Atoms are then rescaled to unit norm with
    the inverse scaling moved into ``A``; unused atoms are left as they are.
    """
    D, A = D.copy(), A.copy()
    used = np.flatnonzero(np.any(A, axis=1))
    for pattern in np.unique(allowed[:, used], axis=0):
        rows = np.flatnonzero(np.all(allowed[:, used] == pattern, axis=1))
        cols = used[pattern]
        if cols.size == 0:
            continue
        Ac = A[cols]
        sol, *_ = np.linalg.lstsq(Ac.T, X[rows].T, rcond=None)
        D[np.ix_(rows, cols)] = sol.T
    norms = np.linalg.norm(D[:, used], axis=0)
    good = norms > 1e-12
    cols = used[good]
    D[:, cols] /= norms[good]
    A[cols] *= norms[good][:, None]
    return D, A


def atom_utility(D, A, E):
    """Objective increase caused by dropping each atom from its users."""
    C = D.T @ E
    return np.einsum("ij,ij->i", A, A) + 2.0 * np.einsum("ij,ij->i", A, C)


def _reseed(D, X, E, allowed, freed):
    # worst-represented residuals, projected on the rows each column may use
    err = np.einsum("ij,ij->j", E, E)
    order = iter(np.argsort(-err, kind="stable"))
    for j in freed:
        for i in order:
            cand = np.where(allowed[:, j], E[:, i], 0.0)
            nrm = np.linalg.norm(cand)
            if nrm > 1e-12:
                D[:, j] = cand / nrm
                break


def _rebalance_state(X, D, A, E, allowed, K, threshold, util):
    """Move common atoms that live on one modality into a specific group.

    A common atom whose energy sits almost entirely on the target (or
    guidance) rows is copied into the least useful column of the matching
    specific group, taking its coefficients along, and the common column is
    freed. Without such an atom the least useful atom overall is freed.
    """
    target = allowed[:, K]
    D, A = D.copy(), A.copy()
    freed = []
    spare = {1: list(np.argsort(util[K:2 * K], kind="stable") + K),
             2: list(np.argsort(util[2 * K:], kind="stable") + 2 * K)}
    for j in range(K):
        frac_target = float(np.sum(D[target, j] ** 2))
        group = 2 if frac_target < threshold else 1 if frac_target > 1 - threshold else 0
        if not group or not spare[group]:
            continue
        k = spare[group].pop(0)
        if util[k] >= util[j]:
            continue
        part = np.where(allowed[:, k], D[:, j], 0.0)
        nrm = np.linalg.norm(part)
        D[:, k] = part / nrm
        A[k] = A[j] * nrm
        A[j] = 0.0
        freed.append(j)
    if not freed:
        j = int(np.argmin(util))
        A[j] = 0.0
        freed.append(j)
    E = X - D @ A
    _reseed(D, X, E, allowed, freed)
    return D, A, E


def _promote_state(X, D, A, E, K, allowed, util):
    """Promote the specific atom whose users share cross-modal structure.

    For every specific atom the rank-1 fit of its users' residual (with the
    atom added back) is recomputed over all rows. The atom with the largest
    gain over its current contribution moves, as that full-row fit, into the
    least useful common column; the specific column is freed. Returns
    ``None`` when no gain beats the utility of the common column it evicts.
    """
    best = None
    for k in range(K, 3 * K):
        users = np.flatnonzero(A[k])
        if users.size == 0:
            continue
        ER = E[:, users] + np.outer(D[:, k], A[k, users])
        U, S, Vt = np.linalg.svd(ER, full_matrices=False)
        gain = S[0] ** 2 - util[k]
        if best is None or gain > best[0]:
            best = (gain, k, users, U[:, 0], S[0] * Vt[0])
    if best is None:
        return None
    gain, k, users, atom, coef = best
    j = int(np.argmin(util[:K]))
    if gain <= util[j]:
        return None
    D, A = D.copy(), A.copy()
    atom, coef = _sign_fix(atom, coef)
    D[:, j] = atom
    A[j] = 0.0
    A[j, users] = coef
    A[k] = 0.0
    E = X - D @ A
    _reseed(D, X, E, allowed, [k])
    return D, A, E


def _split_state(X, D, A, E, K, allowed, util):
    """Split an atom that blends two patterns of the same group.

    The users of a blended atom leave residuals along one common direction.
    The atom with the largest second singular value of its users' residual
    (atom added back) hands that direction, with its coefficients, to the
    least useful column of its own group. Returns ``None`` when the split
    would not beat the utility of the evicted column.
    """
    best = None
    for j in range(3 * K):
        users = np.flatnonzero(A[j])
        if users.size < 2:
            continue
        rows = allowed[:, j]
        ER = (E[:, users] + np.outer(D[:, j], A[j, users]))[rows]
        U, S, Vt = np.linalg.svd(ER, full_matrices=False)
        if best is None or S[1] > best[0]:
            best = (S[1], j, users, rows, U[:, 1], S[1] * Vt[1])
    if best is None:
        return None
    sv, j, users, rows, vec, coef = best
    g = j // K
    k = g * K + int(np.argmin(util[g * K:(g + 1) * K]))
    if k == j or sv * sv <= util[k]:
        return None
    D, A = D.copy(), A.copy()
    atom = np.zeros(D.shape[0])
    atom[rows] = vec
    atom, coef = _sign_fix(atom, coef)
    D[:, k] = atom
    A[k] = 0.0
    A[k, users] = coef
    return D, A, X - D @ A


def _restart_states(X, D, A, allowed, K, threshold):
    """Perturbed starting points for alternative iterations."""
    E = X - D @ A
    util = atom_utility(D, A, E)
    states = [_rebalance_state(X, D, A, E, allowed, K, threshold, util)]
    promoted = _promote_state(X, D, A, E, K, allowed, util)
    if promoted is not None:
        states.append(promoted)
    split = _split_state(X, D, A, E, K, allowed, util)
    if split is not None:
        states.append(split)
    return states


def train_coupled(training, cfg, layout, patch_side=None, provenance=None):
    """Learn a coupled dictionary from stacked training signals.

    Each iteration codes all signals with OMP against the frozen dictionary
    and then sweeps the atoms with constrained K-SVD updates, followed by up
    to ``cfg.refit_rounds`` joint least-squares refits of atoms and
    coefficients on the fixed supports. A signal keeps its previous code
    when the fresh OMP code fits it worse, and refits are only kept when
    they help, so the logged objective never increases.

    Common atoms can drift onto a single modality, where a specific atom
    would serve equally well; specific atoms can end up holding one half of
    a cross-modal pattern; and one atom can blend two patterns. Whenever an
    iteration fails to cut the objective by the factor ``cfg.stall_ratio``
    it is also run from perturbed states that undo these situations (see
    ``_restart_states``), and whichever outcome has the lowest objective is
    kept.

    Parameters
    ----------
    training : (d, P) array
        Stacked signals; ``d = 2n`` for ``"denoise"``, ``3n`` for ``"superres"``.
    cfg : TrainConfig
    layout : {"denoise", "superres"}
    """
    X = np.asarray(training, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise InputError("empty training set")
    if not np.all(np.isfinite(X)):
        raise InputError("training signals contain non-finite values")
    p = _infer_patch_side(layout, X.shape[0], patch_side)
    n, L = p * p, 3 * cfg.K
    P = X.shape[1]
    if P < L:
        warnings.warn(f"only {P} training signals for {L} atoms", stacklevel=2)

    D, allowed = _init_stacked(X, cfg, layout, n)
    A = np.zeros((L, P))
    E = X.copy()
    stop = StopRule(max_sparsity=cfg.s, residual_tol=cfg.residual_tol)
    objective_log = []
    initial = None
    n_rebalanced = 0

    for it in range(cfg.iterations):
        D1, A1, E1, obj, coded, n_dead = _iterate(X, D, A, E, allowed, stop, cfg)
        if initial is None:
            initial = coded
        stalled = bool(objective_log) and obj > cfg.stall_ratio * objective_log[-1]
        if cfg.rebalance and stalled:
            accepted = False
            for moved in _restart_states(X, D, A, allowed, cfg.K, cfg.rebalance_threshold):
                D2, A2, E2, obj2, _, n_dead2 = _iterate(X, *moved, allowed, stop, cfg)
                if obj2 < obj:
                    D1, A1, E1, obj, n_dead = D2, A2, E2, obj2, n_dead2
                    accepted = True
            n_rebalanced += accepted
        D, A, E = D1, A1, E1
        objective_log.append(obj)
        log.info("iteration %d: objective %.6g (%d atoms replaced)", it + 1, obj, n_dead)

    prov = {
        "K": cfg.K,
        "sparsity": cfg.s,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "initial_objective": initial,
        "objective_log": objective_log,
        "rebalanced_iterations": n_rebalanced,
    }
    prov.update(provenance or {})
    return CoupledDictionary.from_stacked(layout, D, p, prov)


def atom_recovery_rate(learned, planted, threshold=0.99):
    """Fraction of planted atoms matched (up to sign) with ``|<a, b>| >= threshold``."""
    Dl = np.asarray(learned, dtype=np.float64)
    Dp = np.asarray(planted, dtype=np.float64)
    Dl = Dl / np.linalg.norm(Dl, axis=0)
    Dp = Dp / np.linalg.norm(Dp, axis=0)
    best = np.abs(Dp.T @ Dl).max(axis=1)
    return float(np.mean(best >= threshold))
