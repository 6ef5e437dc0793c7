import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from partucker.decompose import (DecomposeOptions, TuckerModel, choose_rank, eig_leading,
                                 fit_error_sq, hooi, jacobi_eigh, order_modes, reconstruct,
                                 sign_fix, sthosvd)
from partucker.io import generate_synthetic
from partucker.tensor import DenseTensor

from oracles import full_product, unfold


def _rel_err(x, model):
    return np.linalg.norm(x - reconstruct(model).data) / np.linalg.norm(x)


def _orthonormal(u, tol=1e-12):
    return np.max(np.abs(u.T @ u - np.eye(u.shape[1]))) <= tol


# eigensolver ------------------------------------------------------------

def test_eig_diagonal():
    res = eig_leading(np.diag([1.0, 3.0, 2.0]))
    np.testing.assert_allclose(res.eigenvalues, [3, 2, 1])
    np.testing.assert_array_equal(np.abs(res.vectors), np.eye(3)[:, [1, 2, 0]])


def test_eig_identity_degenerate():
    res = eig_leading(np.eye(3))
    np.testing.assert_allclose(res.eigenvalues, [1, 1, 1])
    assert _orthonormal(res.vectors)


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
def test_eig_residual_and_trace(rng, method):
    a = rng.standard_normal((7, 5))
    s = a.T @ a
    res = eig_leading(s, method=method)
    assert np.all(np.diff(res.eigenvalues) <= 0)
    for lam, v in zip(res.eigenvalues, res.vectors.T):
        assert np.linalg.norm(s @ v - lam * v) <= 1e-10 * np.linalg.norm(s)
    assert res.eigenvalues.sum() == pytest.approx(np.trace(s), rel=1e-12)


def test_jacobi_agrees_with_lapack(rng):
    a = rng.standard_normal((6, 6))
    s = a + a.T
    w_ref = np.linalg.eigvalsh(s)
    w, _ = jacobi_eigh(s)
    np.testing.assert_allclose(w, w_ref, atol=1e-12 * np.abs(w_ref).max())
    j = eig_leading(s, method="jacobi")
    l = eig_leading(s)
    np.testing.assert_allclose(j.vectors, l.vectors, atol=1e-10)


def test_eig_count_and_full_spectrum(rng):
    a = rng.standard_normal((5, 5))
    res = eig_leading(a @ a.T, 2)
    assert res.vectors.shape == (5, 2)
    assert res.eigenvalues.shape == (5,)


def test_eig_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        eig_leading(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sign_fix_makes_largest_entry_positive(rng):
    u = rng.standard_normal((6, 3))
    f = sign_fix(u)
    for col in f.T:
        assert col[np.argmax(np.abs(col))] > 0
    np.testing.assert_array_equal(np.abs(f), np.abs(u))


# rank selection ---------------------------------------------------------

def test_choose_rank_zero_epsilon_full_rank():
    assert choose_rank([5.0, 3.0, 2.0, 1.0], 11.0, 0.0, 3) == 4


def test_choose_rank_hand_example():
    assert choose_rank([9.0, 4.0, 1.0], 14.0, np.sqrt(1.5 / 14.0), 1) == 2


def test_choose_rank_rank_one():
    assert choose_rank([1.0, 0.0, 0.0], 1.0, 1e-3, 3) == 1


def test_choose_rank_minimum_one():
    assert choose_rank([1.0, 0.5], 1.5, 10.0, 1) == 1


def test_choose_rank_clips_tiny_negatives():
    assert choose_rank([4.0, 1.0, -1e-15], 5.0, 0.0, 1) == 2


def test_choose_rank_errors():
    with pytest.raises(ValueError):
        choose_rank([], 1.0, 0.1, 1)
    with pytest.raises(ValueError):
        choose_rank([1.0, 2.0], 3.0, 0.1, 1)


# mode ordering ----------------------------------------------------------

def test_order_natural():
    assert order_modes((4, 5, 6), None, "natural") == (0, 1, 2)


def test_order_max_ratio_example():
    # I/R = (2.5, 25, 2.5, 2.5): the second mode goes first
    order = order_modes((25, 250, 250, 250), (10, 10, 100, 100), "max-compression-ratio")
    assert order[0] == 1
    assert order == (1, 0, 2, 3)


def test_order_greedy_tie_break():
    assert order_modes((8, 8, 8), (2, 2, 2), "greedy-flops") == (0, 1, 2)


def test_order_greedy_prefers_cheap_step():
    # the TTM term 2 R_n prod(D) makes the strongly truncated mode cheapest
    assert order_modes((20, 20, 20), (19, 2, 19), "greedy-flops") == (1, 0, 2)


def test_order_explicit_and_errors():
    assert order_modes((3, 3, 3), None, (2, 0, 1)) == (2, 0, 1)
    with pytest.raises(ValueError):
        order_modes((3, 3, 3), None, (0, 0, 1))
    with pytest.raises(ValueError):
        order_modes((3, 3), None, "sideways")
    with pytest.raises(ValueError):
        DecomposeOptions(mode_order="sideways")
    with pytest.raises(ValueError):
        DecomposeOptions(epsilon=-1)


# ST-HOSVD ---------------------------------------------------------------

def test_sthosvd_exact_tucker_recovery():
    x = generate_synthetic((8, 8, 8), (2, 2, 2), 0.0, seed=3)
    m = sthosvd(x, epsilon=1e-8)
    assert m.ranks == (2, 2, 2)
    assert _rel_err(x.data, m) <= 1e-10
    for u in m.factors:
        assert _orthonormal(u)


def test_sthosvd_large_epsilon_rank_one(rng):
    x = rng.standard_normal((5, 6, 4))
    # eps^2 / N >= 1 lets every mode drop to rank 1
    m = sthosvd(x, epsilon=2.0)
    assert m.ranks == (1, 1, 1)
    assert _rel_err(x, m) <= 1.0


@pytest.mark.parametrize("order", ["natural", "greedy-flops", "max-ratio", (2, 0, 1)])
def test_sthosvd_bound_every_order(rng, order):
    x = rng.standard_normal((10, 10, 10))
    m = sthosvd(x, epsilon=0.3, mode_order=order)
    assert _rel_err(x, m) <= 0.3


def test_sthosvd_follows_algorithm(rng):
    # replay the algorithm with independent kernels
    x = rng.standard_normal((6, 5, 4))
    m = sthosvd(x, epsilon=0.2)
    y = x
    nsq = np.sum(x * x)
    for n in range(3):
        g = unfold(y, n) @ unfold(y, n).T
        w, v = np.linalg.eigh(g)
        w, v = w[::-1], v[:, ::-1]
        tails = [w[r:].sum() for r in range(len(w) + 1)]
        r = next(r for r in range(1, len(w) + 1) if tails[r] <= 0.04 * nsq / 3)
        assert m.factors[n].shape[1] == r
        np.testing.assert_allclose(np.abs(m.factors[n]), np.abs(v[:, :r]), atol=1e-10)
        y = np.moveaxis(np.tensordot(m.factors[n].T, y, axes=(1, n)), 0, n)
    np.testing.assert_allclose(m.core.data, y, atol=1e-12)


def test_sthosvd_fixed_ranks(rng):
    x = rng.standard_normal((6, 5, 4))
    m = sthosvd(x, DecomposeOptions(ranks=(2, 3, 1)))
    assert m.ranks == (2, 3, 1)


def test_sthosvd_deterministic(rng):
    x = rng.standard_normal((7, 6, 5))
    a = sthosvd(x, epsilon=0.2, mode_order="max-ratio")
    b = sthosvd(x, epsilon=0.2, mode_order="max-ratio")
    assert a.core == b.core
    for u, v in zip(a.factors, b.factors):
        np.testing.assert_array_equal(u, v)


@given(st.integers(0, 10**6), st.sampled_from([0.05, 0.2, 0.5]))
@settings(max_examples=25, deadline=None)
def test_sthosvd_rank_selection_soundness(seed, eps):
    r = np.random.default_rng(seed)
    dims = tuple(r.integers(2, 7, size=3))
    x = r.standard_normal(dims)
    m = sthosvd(x, epsilon=eps)
    err_sq = np.sum((x - reconstruct(m).data) ** 2)
    assert err_sq <= eps ** 2 * np.sum(x * x) * (1 + 1e-12)


# HOOI -------------------------------------------------------------------

def test_hooi_zero_iterations_equals_sthosvd(rng):
    x = rng.standard_normal((6, 5, 4))
    a = sthosvd(x, epsilon=0.3)
    b = hooi(x, epsilon=0.3, max_hooi_iters=0)
    assert a.core == b.core
    for u, v in zip(a.factors, b.factors):
        np.testing.assert_array_equal(u, v)


def test_hooi_exact_low_rank_unchanged():
    x = generate_synthetic((8, 7, 6), (2, 3, 2), 0.0, seed=5)
    a = sthosvd(x, epsilon=1e-8)
    b = hooi(x, epsilon=1e-8, max_hooi_iters=3)
    nx = x.norm()
    assert abs(_rel_err(x.data, a) - _rel_err(x.data, b)) <= 1e-12 * max(1.0, nx)


def test_hooi_monotone_and_fit_identity():
    x = generate_synthetic((10, 10, 10), (3, 3, 3), 0.5, seed=9).data
    m = hooi(x, epsilon=0.3, max_hooi_iters=5, hooi_rel_tol=-np.inf)
    nsq = np.sum(x * x)
    h = m.fit_history
    assert len(h) == 6
    assert all(b <= a + 1e-12 * nsq for a, b in zip(h, h[1:]))
    resid = np.sum((x - reconstruct(m).data) ** 2)
    assert abs(h[-1] - resid) <= 1e-10 * nsq
    for u in m.factors:
        assert _orthonormal(u)


def test_hooi_stops_on_small_decrease(rng):
    x = rng.standard_normal((6, 6, 6))
    m = hooi(x, epsilon=0.5, max_hooi_iters=25, hooi_rel_tol=1.0)
    assert len(m.fit_history) == 2


# reconstruction ---------------------------------------------------------

def test_reconstruct_identity_model(rng):
    x = rng.standard_normal((3, 4, 2))
    m = TuckerModel(DenseTensor(x), [np.eye(3), np.eye(4), np.eye(2)], float(np.linalg.norm(x)))
    assert reconstruct(m) == DenseTensor(x)


def test_reconstruct_matches_independent_product(rng):
    core = rng.standard_normal((2, 3, 2))
    us = [np.linalg.qr(rng.standard_normal((d, r)))[0] for d, r in zip((5, 6, 4), (2, 3, 2))]
    m = TuckerModel(DenseTensor(core), us, 1.0)
    np.testing.assert_allclose(reconstruct(m).data, full_product(core, us), atol=1e-13)


def test_partial_reconstruction(rng):
    x = rng.standard_normal((6, 5, 4))
    m = sthosvd(x, epsilon=0.4)
    full = reconstruct(m).data
    part = reconstruct(m, [slice(1, 4), None, [0, 3]]).data
    want = full[1:4][:, :, [0, 3]]
    assert np.max(np.abs(part - want)) <= 1e-13 * np.max(np.abs(full))
    single = reconstruct(m, [2, 3, 1]).data
    assert single.shape == (1, 1, 1)
    assert single[0, 0, 0] == pytest.approx(full[2, 3, 1], rel=1e-13, abs=1e-15)
    np.testing.assert_array_equal(reconstruct(m, {0: None}).data, full)


def test_partial_reconstruction_out_of_range(rng):
    m = sthosvd(rng.standard_normal((3, 3)), epsilon=0.1)
    with pytest.raises(IndexError):
        reconstruct(m, [slice(0, 5), None])
    with pytest.raises(IndexError):
        reconstruct(m, {2: None})
    with pytest.raises(IndexError):
        reconstruct(m, [[3], None])


def test_fit_error_sq_cases(rng):
    x = generate_synthetic((6, 6, 6), (2, 2, 2), 0.0, seed=1)
    m = sthosvd(x, epsilon=1e-8)
    assert abs(fit_error_sq(m)) <= 1e-12 * x.norm() ** 2
    us = [np.linalg.qr(rng.standard_normal((6, 2)))[0] for _ in range(3)]
    zero = TuckerModel(DenseTensor(np.zeros((2, 2, 2))), us, 3.0)
    assert fit_error_sq(zero) == 9.0


def test_fit_error_sq_matches_residual(rng):
    x = rng.standard_normal((7, 6, 5))
    m = sthosvd(x, epsilon=0.35)
    resid = np.sum((x - reconstruct(m).data) ** 2)
    assert abs(fit_error_sq(m) - resid) <= 1e-10 * np.sum(x * x)
