import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmcdl.errors import DegenerateAtomError, DimensionError, NoUsableAtomError
from mmcdl.sparse import (BlockLayout, StackedDictionary, StopRule, batch_code, code_columns,
                          masked_omp, mutual_coherence, normalize, omp)


def unit_dict(rng, d, L):
    D = rng.standard_normal((d, L))
    return D / np.linalg.norm(D, axis=0)


def low_coherence_dict(rng, d, L, limit):
    """Orthonormal columns blended with noise until coherence <= limit."""
    Q, _ = np.linalg.qr(rng.standard_normal((d, L)))
    N = rng.standard_normal((d, L))
    t = 1.0
    while True:
        D = Q + t * N / np.sqrt(d)
        D /= np.linalg.norm(D, axis=0)
        if mutual_coherence(D) < limit:
            return D
        t *= 0.8


def ls_residual(D, x, support):
    if not support:
        return float(x @ x)
    S = D[:, list(support)]
    c, *_ = np.linalg.lstsq(S, x, rcond=None)
    r = x - S @ c
    return float(r @ r)


def erc_holds(D, support):
    S = D[:, list(support)]
    pinv = np.linalg.pinv(S)
    others = [j for j in range(D.shape[1]) if j not in support]
    return max(np.abs(pinv @ D[:, j]).sum() for j in others) < 1


def test_normalize_examples():
    sd = normalize(StackedDictionary(np.eye(3)))
    np.testing.assert_array_equal(sd.atoms, np.eye(3))
    np.testing.assert_array_equal(sd.column_norms, 1.0)
    sd = normalize(StackedDictionary(np.array([[3.0], [4.0], [0.0]])))
    np.testing.assert_allclose(sd.atoms[:, 0], [0.6, 0.8, 0.0])
    assert sd.column_norms[0] == 5.0
    assert sd.is_normalized()


def test_normalize_idempotent(rng):
    sd = normalize(StackedDictionary(unit_dict(rng, 8, 12)))
    again = normalize(sd)
    np.testing.assert_allclose(again.atoms, sd.atoms, atol=1e-12)


def test_normalize_rejects_zero_column():
    with pytest.raises(DegenerateAtomError):
        normalize(StackedDictionary(np.array([[1.0, 0.0], [0.0, 0.0]])))


def test_stop_rule_validation():
    with pytest.raises(ValueError):
        StopRule()
    with pytest.raises(ValueError):
        StopRule(max_sparsity=-1)
    assert StopRule(residual_tol=0.5).budget(10, 4) == 4
    assert StopRule(max_sparsity=3).budget(10, 4) == 3


def test_omp_identity_single_atom(backend):
    sd = StackedDictionary(np.eye(4))
    t = omp(np.array([0, 3.0, 0, 0]), sd, StopRule(max_sparsity=1))
    assert t.support == (1,)
    assert t.values[0] == 3.0
    assert t.residual_norm2 == 0.0


def test_omp_orthonormal_two_atoms(backend, rng):
    Q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    sd = StackedDictionary(Q)
    x = 2 * Q[:, 3] - 5 * Q[:, 7]
    t = omp(x, sd, StopRule(max_sparsity=2))
    assert set(t.support) == {3, 7}
    np.testing.assert_allclose(t.coef[[3, 7]], [2, -5], atol=1e-12)
    assert t.residual_norm2 <= 1e-12


def test_omp_low_coherence_exact_recovery(backend, rng):
    s = 3
    D = low_coherence_dict(rng, 16, 14, 1 / (2 * s - 1))
    assert mutual_coherence(D) < 1 / (2 * s - 1)
    sd = StackedDictionary(D)
    for _ in range(20):
        sup = rng.choice(14, s, replace=False)
        x = D[:, sup] @ (rng.choice([-1, 1], s) * rng.uniform(0.5, 2, s))
        t = omp(x, sd, StopRule(max_sparsity=s))
        assert set(t.support) == set(sup.tolist())
        assert t.residual_norm2 <= 1e-12


def test_omp_random_16x32_recovery_under_erc(backend, rng):
    # the coherence bound is out of reach for 32 atoms in 16 dimensions (Welch
    # bound 0.18), so use the support-wise exact recovery condition it implies
    D = unit_dict(rng, 16, 32)
    sd = StackedDictionary(D)
    checked = 0
    for _ in range(200):
        sup = tuple(sorted(rng.choice(32, 3, replace=False).tolist()))
        if not erc_holds(D, sup):
            continue
        x = D[:, list(sup)] @ rng.standard_normal(3)
        t = omp(x, sd, StopRule(max_sparsity=3))
        assert tuple(sorted(t.support)) == sup
        checked += 1
    assert checked >= 5


def test_masked_identity_mask_matches_omp(backend, rng):
    sd = StackedDictionary(unit_dict(rng, 12, 20))
    x = rng.standard_normal(12)
    a = omp(x, sd, StopRule(max_sparsity=4))
    b = masked_omp(x, sd, range(12), StopRule(max_sparsity=4))
    assert a.support == b.support
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


def test_masked_identity_example(backend):
    sd = StackedDictionary(np.eye(4))
    t = masked_omp([5.0, 0.0], sd, [0, 1], StopRule(max_sparsity=1))
    assert t.support == (0,)
    assert t.values[0] == pytest.approx(5.0)


def test_masked_recovers_unobserved_rows(backend, rng):
    D = low_coherence_dict(rng, 32, 12, 0.12)
    sd = StackedDictionary(D)
    hits = 0
    for _ in range(20):
        sup = rng.choice(12, 2, replace=False)
        x = D[:, sup] @ (rng.choice([-1, 1], 2) * rng.uniform(0.5, 2, 2))
        rows = np.sort(rng.choice(32, 16, replace=False))
        Dm = D[rows] / np.linalg.norm(D[rows], axis=0)
        if not erc_holds(Dm, tuple(sup.tolist())):
            continue
        t = masked_omp(x[rows], sd, rows, StopRule(max_sparsity=2))
        assert set(t.support) == set(sup.tolist())
        hidden = np.setdiff1d(np.arange(32), rows)
        np.testing.assert_allclose((D @ t.coef)[hidden], x[hidden], atol=1e-6)
        hits += 1
    assert hits > 0


def test_masked_no_usable_atom(backend):
    D = np.zeros((4, 2))
    D[2, 0] = D[3, 1] = 1.0
    sd = StackedDictionary(D)
    with pytest.raises(NoUsableAtomError) as info:
        masked_omp([1.0, 2.0], sd, [0, 1], StopRule(max_sparsity=1))
    assert info.value.column == 0


def test_masked_rejects_bad_rows():
    sd = StackedDictionary(np.eye(3))
    with pytest.raises(DimensionError):
        masked_omp([1.0], sd, [5], StopRule(max_sparsity=1))
    with pytest.raises(DimensionError):
        masked_omp([1.0, 2.0], sd, [0], StopRule(max_sparsity=1))


def test_omp_requires_normalized():
    with pytest.raises(ValueError):
        omp(np.ones(2), StackedDictionary(2 * np.eye(2)), StopRule(max_sparsity=1))


def test_batch_code_trivia(backend, rng):
    sd = StackedDictionary(unit_dict(rng, 8, 16), block_layout=BlockLayout(4))
    assert batch_code(np.zeros((8, 0)), sd, StopRule(max_sparsity=2)) == []
    X = rng.standard_normal((8, 7))
    one = omp(X[:, 2], sd, StopRule(max_sparsity=3))
    many = batch_code(X, sd, StopRule(max_sparsity=3))
    assert many[2].support == one.support
    perm = rng.permutation(7)
    shuffled = batch_code(X[:, perm], sd, StopRule(max_sparsity=3))
    for k, i in enumerate(perm):
        assert shuffled[k].support == many[i].support
        np.testing.assert_allclose(shuffled[k].values, many[i].values, atol=1e-14)
    t = many[0]
    assert t.z.size == t.u.size == t.v.size == 4
    assert t.nnz <= 3 and len(set(t.support)) == t.nnz


def test_tie_break_lowest_index(backend):
    D = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    t = omp(np.array([1.0, 0.0]), StackedDictionary(D), StopRule(max_sparsity=1))
    assert t.support == (0,)


def test_singular_update_truncates(backend):
    D = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    D[2, 1] = 1e-7
    D /= np.linalg.norm(D, axis=0)
    x = np.array([1.0, 0.0, 1e-3])
    t = omp(x, StackedDictionary(D), StopRule(max_sparsity=3))
    assert t.truncated
    assert 1 not in t.support or 0 not in t.support


def test_residual_tolerance_stops_early(backend):
    sd = StackedDictionary(np.eye(4))
    x = np.array([4.0, 3.0, 0.1, 0.0])
    t = omp(x, sd, StopRule(max_sparsity=4, residual_tol=0.005))
    assert t.support == (0, 1, 2)
    t = omp(x, sd, StopRule(max_sparsity=4, residual_tol=0.05))
    assert t.support == (0, 1)
    assert t.residual_norm2 == pytest.approx(0.01)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 12), st.integers(4, 20), st.integers(1, 5))
def test_residual_monotone_and_orthogonal(seed, d, L, s):
    rng = np.random.default_rng(seed)
    D = unit_dict(rng, d, L)
    x = rng.standard_normal(d)
    sd = StackedDictionary(D)
    prev = float(x @ x)
    for k in range(1, s + 1):
        t = omp(x, sd, StopRule(max_sparsity=k))
        assert t.nnz <= k
        r = x - D @ t.coef
        assert t.residual_norm2 <= prev + 1e-12
        np.testing.assert_allclose(t.residual_norm2, r @ r, atol=1e-9)
        if t.nnz:
            assert np.abs(D[:, list(t.support)].T @ r).max() <= 1e-8
        prev = t.residual_norm2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_rescaling_consistency(seed, lam):
    rng = np.random.default_rng(seed)
    D = unit_dict(rng, 10, 15)
    X = rng.standard_normal((10, 5))
    c = int(rng.integers(15))
    Ds = D.copy()
    Ds[:, c] *= lam
    a = code_columns(D, X, StopRule(max_sparsity=4))
    b = code_columns(Ds, X, StopRule(max_sparsity=4))
    np.testing.assert_array_equal(a.support, b.support)
    scale = np.where(a.support == c, 1 / lam, 1.0)
    np.testing.assert_allclose(b.coefs, a.coefs * scale, rtol=1e-8, atol=1e-10)


def brute_force(D, x, s):
    best = float(x @ x)
    for k in range(1, s + 1):
        for sup in itertools.combinations(range(D.shape[1]), k):
            best = min(best, ls_residual(D, x, sup))
    return best


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(2, 10), st.integers(1, 2))
def test_omp_never_beats_brute_force(seed, d, L, s):
    rng = np.random.default_rng(seed)
    D = unit_dict(rng, d, L)
    x = rng.standard_normal(d)
    t = omp(x, StackedDictionary(D), StopRule(max_sparsity=s))
    assert ls_residual(D, x, t.support) >= brute_force(D, x, s) - 1e-10


def test_mutual_coherence_examples():
    assert mutual_coherence(np.eye(3)) == 0.0
    D = np.array([[1.0, 1.0], [0.0, 1.0]])
    assert mutual_coherence(D) == pytest.approx(1 / np.sqrt(2))
