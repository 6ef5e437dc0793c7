import numpy as np
import pytest

from partucker.decompose import DecomposeOptions, hooi, sign_fix, sthosvd
from partucker.distributed import (DistFactorMatrix, block_range, block_sizes, distribute,
                                   gather, local_dims, memory_bound, par_eigenvectors, par_gram,
                                   par_hooi, par_sthosvd, par_ttm)
from partucker.io import generate_synthetic
from partucker.runtime import Harness, ProcessGrid

from oracles import mode_product, unfold


def test_block_range_remainder_first():
    assert block_sizes(10, 3) == [4, 3, 3]
    assert block_range(10, 3, 0) == (0, 4)
    assert block_range(10, 3, 2) == (7, 10)
    assert block_sizes(4, 4) == [1, 1, 1, 1]


def test_distribute_gather_roundtrip(rng):
    x = rng.standard_normal((5, 4, 3))
    g = ProcessGrid((2, 3, 1))
    d = distribute(x, g)
    assert d.blocks[0].dims == (3, 2, 3)
    assert local_dims(x.shape, g, 5) == (2, 1, 3)
    assert gather(d).data.tolist() == x.tolist()


def test_distribute_rejects_bad_grid(rng):
    with pytest.raises(ValueError):
        distribute(rng.standard_normal((2, 3)), (3, 1))
    with pytest.raises(ValueError):
        distribute(rng.standard_normal((2, 3)), (1, 1, 1))


def test_factor_matrix_replicated_over_rows(rng):
    v = rng.standard_normal((3, 7))
    g = ProcessGrid((2, 3))
    dv = DistFactorMatrix.from_matrix(v, g, 1)
    assert dv.replicas_consistent()
    np.testing.assert_array_equal(dv.gather(), v)
    assert dv.blocks[0].shape == (3, 3)
    dv.blocks[1] = dv.blocks[1] + 1
    assert not dv.replicas_consistent()


KERNEL_CASES = [
    # dims, grid, mode, K
    ((8, 6, 4), (1, 1, 1), 0, 3),
    ((8, 6, 4), (2, 1, 1), 0, 3),
    ((8, 6, 4), (2, 1, 1), 1, 2),
    ((8, 6, 4), (2, 3, 1), 1, 6),
    ((8, 6, 4), (2, 3, 1), 0, 5),
    ((8, 6, 4), (2, 3, 2), 2, 2),
    ((8, 6, 4), (4, 1, 2), 0, 4),
    ((7, 5, 3), (3, 2, 1), 0, 4),
    ((7, 5, 3), (3, 2, 1), 1, 2),
    ((7, 5, 3), (2, 2, 3), 2, 3),
    ((9, 4), (3, 2), 0, 7),
    ((9, 4), (3, 2), 1, 3),
    ((5, 4, 3, 2), (2, 2, 1, 2), 3, 2),
    ((5, 4, 3, 2), (1, 2, 3, 1), 2, 3),
]


@pytest.mark.parametrize("mode", ["serial", "concurrent"])
@pytest.mark.parametrize("dims,grid,n,k", KERNEL_CASES)
def test_par_ttm_matches_sequential(rng, dims, grid, n, k, mode):
    x = rng.standard_normal(dims)
    v = rng.standard_normal((k, dims[n]))
    h = Harness(grid, mode)
    z = par_ttm(distribute(x, grid), DistFactorMatrix.from_matrix(v, grid, n), n, harness=h)
    want = mode_product(x, v, n)
    got = gather(z).data
    assert np.max(np.abs(got - want)) <= 1e-12 * np.max(np.abs(want))
    pn = grid[n]
    words = h.ledger.snapshot()
    if pn == 1:
        assert h.ledger.totals()["messages"] == 0
    for r, rec in enumerate(words):
        # each rank ships every output slab it does not own
        ld = local_dims(dims, ProcessGrid(grid), r)
        others = int(np.prod(ld)) // ld[n]
        mine = block_sizes(k, pn)[ProcessGrid(grid).coords(r)[n]]
        assert rec["words_sent"] == (k - mine) * others


@pytest.mark.parametrize("dims,grid,n,k", KERNEL_CASES)
def test_par_gram_matches_sequential(rng, dims, grid, n, k):
    x = rng.standard_normal(dims)
    h = Harness(grid, "serial")
    s = par_gram(distribute(x, grid), n, harness=h)
    assert s.replicas_consistent()
    m = unfold(x, n)
    want = m @ m.T
    assert np.max(np.abs(s.gather() - want)) <= 1e-12 * np.max(np.abs(want))
    if grid[n] == 1:
        assert h.ledger.totals()["send"]["messages"] == 0


@pytest.mark.parametrize("dims,grid,n", [
    ((8, 6, 4), (2, 1, 1), 0), ((8, 6, 4), (4, 2, 1), 0), ((8, 6, 4), (2, 3, 2), 1),
    ((6, 6, 6), (1, 3, 2), 2), ((12, 4), (3, 2), 0),
])
def test_gram_ring_volume(rng, dims, grid, n):
    x = rng.standard_normal(dims)
    h = Harness(grid, "serial")
    par_gram(distribute(x, grid), n, harness=h)
    p = int(np.prod(grid))
    per_rank = 2 * (grid[n] - 1) * int(np.prod(dims)) // p
    for rec in h.ledger.snapshot():
        ring = rec["by_kind"]["send"]["words"] + rec["received_by_kind"]["send"]["words"]
        assert ring == per_rank


def test_ttm_rejects_too_few_rows(rng):
    x = rng.standard_normal((6, 4))
    v = rng.standard_normal((1, 6))
    with pytest.raises(ValueError):
        par_ttm(distribute(x, (2, 1)), DistFactorMatrix.from_matrix(v, (2, 1), 0), 0,
                harness=Harness((2, 1), "serial"))


def test_par_eigenvectors(rng):
    x = rng.standard_normal((8, 5, 3))
    grid = (4, 1, 3)
    dx = distribute(x, grid)
    s = par_gram(dx, 0, harness=Harness(grid, "serial"))
    u = par_eigenvectors(s, 3, harness=Harness(grid, "serial"))
    assert u.shape == (3, 8)
    assert u.replicas_consistent()
    m = unfold(x, 0)
    w, vecs = np.linalg.eigh(m @ m.T)
    np.testing.assert_allclose(u.gather().T, sign_fix(vecs[:, ::-1][:, :3]), atol=1e-10)


@pytest.mark.parametrize("grid", [(1, 1, 1), (2, 1, 1), (2, 2, 2), (3, 1, 2)])
def test_par_sthosvd_matches_sequential(grid):
    x = generate_synthetic((12, 10, 8), (4, 3, 2), 0.05, seed=2)
    for order in ["natural", "max-ratio"]:
        opts = DecomposeOptions(epsilon=0.1, mode_order=order)
        seq = sthosvd(x, opts)
        par = par_sthosvd(distribute(x, grid), opts, harness=Harness(grid, "serial")).gather()
        assert par.ranks == seq.ranks
        for a, b in zip(par.factors, seq.factors):
            np.testing.assert_allclose(a, b, atol=1e-10)
        assert abs(par.fit_history[0] - seq.fit_history[0]) <= 1e-12 * seq.original_norm ** 2


def test_par_hooi_matches_sequential():
    x = generate_synthetic((10, 8, 6), (3, 3, 2), 0.2, seed=4)
    opts = DecomposeOptions(epsilon=0.25, max_hooi_iters=3, hooi_rel_tol=0.0)
    seq = hooi(x, opts)
    grid = (2, 2, 1)
    par = par_hooi(distribute(x, grid), opts, harness=Harness(grid, "concurrent")).gather()
    assert par.ranks == seq.ranks
    assert len(par.fit_history) == len(seq.fit_history)
    np.testing.assert_allclose(par.fit_history, seq.fit_history, atol=1e-10 * seq.original_norm ** 2)
    for a, b in zip(par.factors, seq.factors):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_memory_bound_formula():
    # 2 * 4*4*8 + (2*4 + 2*4 + 2*8) + 8*8 + 2*8
    assert memory_bound((8, 8, 8), (2, 2, 2), (2, 2, 1)) == 256 + 32 + 64 + 16


@pytest.mark.parametrize("dims,ranks,grid", [
    ((8, 8, 8), (2, 3, 4), (2, 2, 2)),
    ((10, 9, 8), (3, 4, 2), (3, 1, 2)),
])
def test_peak_memory_within_bound(dims, ranks, grid):
    x = generate_synthetic(dims, ranks, 0.0, seed=0)
    h = Harness(grid, "serial")
    par_sthosvd(distribute(x, grid), DecomposeOptions(ranks=ranks), harness=h)
    assert 0 < max(h.peak_memory) <= memory_bound(dims, ranks, grid)
