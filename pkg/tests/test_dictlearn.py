import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmcdl.dictlearn import (DENOISE, SUPERRES, CoupledDictionary, TrainConfig, atom_recovery_rate,
                             init_dictionary, ksvd_update_atom, objective, refit_codes,
                             refit_dictionary, structural_mask, train_coupled)
from mmcdl.errors import DimensionError, InputError, LayoutError
from mmcdl.synth import planted_codes, planted_dictionary


def zero_block_max(cd):
    D = cd.stacked()
    return np.abs(D[~structural_mask(cd.layout, cd.n, cd.K)]).max()


def test_structural_mask_shapes():
    m = structural_mask(DENOISE, 4, 2)
    assert m.shape == (8, 6)
    assert m[:4, :4].all() and not m[:4, 4:].any()
    assert m[4:, :2].all() and not m[4:, 2:4].any() and m[4:, 4:].all()
    m = structural_mask(SUPERRES, 4, 2)
    assert m.shape == (12, 6)
    assert not m[:8, 4:].any() and not m[8:, 2:4].any()
    with pytest.raises(LayoutError):
        structural_mask("bogus", 4, 2)


def test_stacked_round_trip(rng):
    cd = planted_dictionary(SUPERRES, 4, 3, seed=1, scale=2)
    back = CoupledDictionary.from_stacked(SUPERRES, cd.stacked(), 4)
    for k in cd.blocks:
        np.testing.assert_array_equal(back.blocks[k], cd.blocks[k])
    assert back.rows("x_l", "y").shape == (32, 9)
    est = cd.target_estimator()
    assert not est[:, 6:].any()


def test_dictionary_validates_blocks():
    with pytest.raises(LayoutError):
        CoupledDictionary(DENOISE, 2, 2, {"psi": np.zeros((4, 2))})
    blocks = {k: np.zeros((4, 2)) for k in ("psi_c", "psi", "phi_c", "phi")}
    blocks["phi"] = np.zeros((4, 3))
    with pytest.raises(DimensionError):
        CoupledDictionary(DENOISE, 2, 2, blocks)


def test_objective_examples():
    X = np.array([[1.0, 0.0], [2.0, 3.0]])
    D = np.eye(2)
    assert objective(D, X, X) == 0.0
    assert objective(D, np.zeros((2, 2)), X) == 1 + 4 + 9
    A = np.array([[1.0, 0.0], [0.0, 2.0]])
    # residuals (0, 2) and (0, 1): 4 + 1
    assert objective(D, A, X) == 5.0


def test_config_validation():
    with pytest.raises(InputError):
        TrainConfig(K=0)
    with pytest.raises(InputError):
        TrainConfig(K=1, s=4)
    with pytest.raises(InputError):
        TrainConfig(stall_ratio=0.0)


def test_init_k1_p3_uses_all_signals(rng):
    X = rng.standard_normal((8, 3))
    cd = init_dictionary(X, TrainConfig(K=1, s=1), DENOISE)
    D = cd.stacked()
    allowed = structural_mask(DENOISE, 4, 1)
    used = set()
    for j in range(3):
        for i in range(3):
            cand = np.where(allowed[:, j], X[:, i], 0.0)
            if np.allclose(D[:, j], cand / np.linalg.norm(cand)):
                used.add(i)
    assert used == {0, 1, 2}


def test_init_jitter_path(rng):
    X = rng.standard_normal((8, 2))
    with pytest.warns(UserWarning):
        cd = train_coupled(X, TrainConfig(K=1, s=1, iterations=1), DENOISE)
    D = init_dictionary(X, TrainConfig(K=1, s=1), DENOISE).stacked()
    np.testing.assert_allclose(np.linalg.norm(D, axis=0), 1.0)
    assert zero_block_max(cd) == 0.0


def test_init_deterministic(rng):
    X = rng.standard_normal((32, 100))
    a = init_dictionary(X, TrainConfig(K=4, seed=3), DENOISE).stacked()
    b = init_dictionary(X, TrainConfig(K=4, seed=3), DENOISE).stacked()
    assert np.array_equal(a, b)


def test_ksvd_single_signal_single_atom(rng):
    allowed = np.ones((5, 1), dtype=bool)
    X = rng.standard_normal((5, 1))
    D = rng.standard_normal((5, 1))
    D /= np.linalg.norm(D)
    A = np.array([[0.3]])
    E = X - D @ A
    assert ksvd_update_atom(0, D, A, E, allowed, X) == "updated"
    nrm = np.linalg.norm(X)
    np.testing.assert_allclose(np.abs(D[:, 0]), np.abs(X[:, 0]) / nrm, atol=1e-12)
    assert abs(A[0, 0]) == pytest.approx(nrm)
    np.testing.assert_allclose(E, 0.0, atol=1e-12)
    assert D[np.argmax(np.abs(D[:, 0])), 0] > 0


def test_ksvd_dead_atom_replaced_by_worst_signal(rng):
    allowed = np.ones((4, 2), dtype=bool)
    X = np.array([[1.0, 0.0, 3.0], [0.0, 1.0, 4.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    D = np.eye(4)[:, :2]
    A = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    A[1] = 0.0  # atom 1 unused by everybody
    E = X - D @ A
    before = A.copy()
    assert ksvd_update_atom(1, D, A, E, allowed, X) == "replaced"
    np.testing.assert_allclose(D[:, 1], [0.6, 0.8, 0.0, 0.0])
    np.testing.assert_array_equal(A, before)


def test_ksvd_keeps_zero_blocks(rng):
    cd = planted_dictionary(DENOISE, 4, 4, seed=0)
    D = cd.stacked()
    allowed = structural_mask(DENOISE, 16, 4)
    A = planted_codes(4, 50, 2, seed=1)
    X = D @ A + 0.1 * rng.standard_normal((32, 50))
    Dn = D + 0.05 * rng.standard_normal(D.shape) * allowed
    Dn /= np.linalg.norm(Dn, axis=0)
    E = X - Dn @ A
    for j in range(12):
        ksvd_update_atom(j, Dn, A, E, allowed, X)
        assert np.abs(Dn[~allowed]).max() == 0.0
    np.testing.assert_allclose(E, X - Dn @ A, atol=1e-10)


def test_refits_preserve_structure_and_descend(rng):
    cd = planted_dictionary(DENOISE, 4, 4, seed=2)
    allowed = structural_mask(DENOISE, 16, 4)
    A = planted_codes(4, 80, 3, seed=3)
    X = cd.stacked() @ A + 0.05 * rng.standard_normal((32, 80))
    D = cd.stacked()
    D2, A2 = refit_dictionary(X, D, A, allowed)
    assert np.abs(D2[~allowed]).max() == 0.0
    np.testing.assert_allclose(np.linalg.norm(D2, axis=0), 1.0, atol=1e-12)
    assert objective(D2, A2, X) <= objective(D, A, X) + 1e-12
    A3 = refit_codes(X, D2, A2)
    assert np.array_equal(A3 != 0, A2 != 0)
    assert objective(D2, A3, X) <= objective(D2, A2, X) + 1e-12


def test_identical_signals_fit_in_one_iteration(rng):
    a = np.zeros(32)
    a[:16] = rng.standard_normal(16)
    X = np.repeat(a[:, None], 40, axis=1)
    cd = train_coupled(X, TrainConfig(K=2, s=1, iterations=1), DENOISE)
    assert cd.objective_log[-1] <= 1e-20


def test_more_iterations_never_worse(rng):
    X = rng.standard_normal((32, 200))
    one = train_coupled(X, TrainConfig(K=4, s=2, iterations=1, seed=1), DENOISE)
    two = train_coupled(X, TrainConfig(K=4, s=2, iterations=2, seed=1), DENOISE)
    assert two.objective_log[-1] <= one.objective_log[-1] + 1e-9
    assert two.objective_log[0] == one.objective_log[0]


def test_training_deterministic(rng):
    X = rng.standard_normal((32, 150))
    a = train_coupled(X, TrainConfig(K=4, s=2, iterations=3, seed=2), DENOISE)
    b = train_coupled(X, TrainConfig(K=4, s=2, iterations=3, seed=2, threads=4), DENOISE)
    assert np.array_equal(a.stacked(), b.stacked())
    assert a.objective_log == b.objective_log


def test_training_rejects_bad_input():
    with pytest.raises(InputError):
        train_coupled(np.zeros((32, 0)), TrainConfig(K=2, s=1), DENOISE)
    with pytest.raises(DimensionError):
        train_coupled(np.zeros((30, 5)), TrainConfig(K=2, s=1), DENOISE)
    X = np.ones((32, 5))
    X[0, 0] = np.nan
    with pytest.raises(InputError):
        train_coupled(X, TrainConfig(K=2, s=1), DENOISE)


def test_superres_training_structure(rng):
    X = rng.standard_normal((48, 200))
    cd = train_coupled(X, TrainConfig(K=3, s=2, iterations=3), SUPERRES)
    assert cd.layout == SUPERRES and cd.stacked().shape == (48, 9)
    assert zero_block_max(cd) == 0.0
    assert np.all(np.diff(cd.objective_log) <= 1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 3))
def test_training_invariants(seed, K, s):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((32, 60))
    cd = train_coupled(X, TrainConfig(K=K, s=min(s, 3 * K), iterations=4, seed=seed), DENOISE)
    log = np.array(cd.objective_log)
    assert np.all(np.diff(log) <= 1e-9)
    assert zero_block_max(cd) == 0.0
    np.testing.assert_allclose(np.linalg.norm(cd.stacked(), axis=0), 1.0, atol=1e-10)


def test_permutation_invariance(rng):
    cd = planted_dictionary(DENOISE, 4, 4, seed=0)
    X = cd.stacked() @ planted_codes(4, 300, 2, seed=1) + 0.01 * rng.standard_normal((32, 300))
    perm = rng.permutation(300)
    cfg = TrainConfig(K=4, s=2, iterations=5, seed=0)
    a = train_coupled(X, cfg, DENOISE).objective_log[-1]
    b = train_coupled(X[:, perm], cfg, DENOISE).objective_log[-1]
    assert abs(a - b) <= 1e-8


def test_atom_recovery_rate_examples(rng):
    D = rng.standard_normal((8, 5))
    assert atom_recovery_rate(-D[:, ::-1], D) == 1.0
    assert atom_recovery_rate(np.eye(8)[:, :1], np.eye(8)[:, :2]) == 0.5
