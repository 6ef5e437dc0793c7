"""Block-distributed tensors and the parallel Tucker kernels.

A tensor of dims ``J_0 x ... x J_{N-1}`` on a ``P_0 x ... x P_{N-1}`` grid is
split into one contiguous subtensor per rank.  A factor-like matrix ``V`` of
shape ``K x J_n`` is split into ``P_n`` column blocks, and every rank whose
mode-``n`` coordinate is ``p`` holds a full copy of block ``p``.  Decomposition
factors are kept in this transposed form (``V = U^T``, ``R_n x I_n``), so a
rank owns the rows of ``U`` that match its slice of the tensor.

Kernels come in two layers: ``*_local`` functions are the per-rank SPMD
bodies taking a :class:`~partucker.runtime.RankContext`; the ``par_*``
wrappers run them on a :class:`~partucker.runtime.Harness` and assemble
global-view objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decompose import (
    DecomposeOptions,
    TuckerModel,
    choose_rank,
    eig_leading,
    noise_floor,
    order_modes,
)
from .runtime import Group, Harness, ProcessGrid, RankContext
from .tensor import DenseTensor, as_tensor, gram, ttm


def block_range(size: int, parts: int, p: int) -> tuple[int, int]:
    """Index range of block ``p`` when ``size`` items are split into ``parts``.

    The first ``size % parts`` blocks get one extra item.
    """
    q, r = divmod(size, parts)
    start = p * q + min(p, r)
    return start, start + q + (1 if p < r else 0)


def block_sizes(size: int, parts: int) -> list[int]:
    return [b - a for a, b in (block_range(size, parts, p) for p in range(parts))]


def _check_partition(size: int, parts: int, what: str):
    if parts > size:
        raise ValueError(f"{what} of size {size} cannot be split over {parts} ranks")


def _as_grid(grid) -> ProcessGrid:
    return grid if isinstance(grid, ProcessGrid) else ProcessGrid(grid)


@dataclass
class DistTensor:
    """Global view of a block-distributed tensor: ``blocks[rank]`` is the local part."""

    dims: tuple
    grid: ProcessGrid
    blocks: list

    def local_dims(self, rank: int) -> tuple[int, ...]:
        return local_dims(self.dims, self.grid, rank)

    def local_slices(self, rank: int) -> tuple[slice, ...]:
        return local_slices(self.dims, self.grid, rank)


def local_slices(dims, grid: ProcessGrid, rank: int) -> tuple[slice, ...]:
    coords = grid.coords(rank)
    return tuple(slice(*block_range(d, p, c)) for d, p, c in zip(dims, grid.pdims, coords))


def local_dims(dims, grid: ProcessGrid, rank: int) -> tuple[int, ...]:
    return tuple(s.stop - s.start for s in local_slices(dims, grid, rank))


def distribute(x, grid) -> DistTensor:
    x = as_tensor(x)
    grid = _as_grid(grid)
    if grid.ndim != x.ndim:
        raise ValueError(f"{grid.ndim}-way grid cannot hold a {x.ndim}-way tensor")
    for n, (d, p) in enumerate(zip(x.dims, grid.pdims)):
        _check_partition(d, p, f"mode {n}")
    blocks = [DenseTensor(x.data[local_slices(x.dims, grid, r)]) for r in range(grid.size)]
    return DistTensor(tuple(x.dims), grid, blocks)


def gather(y: DistTensor) -> DenseTensor:
    out = np.empty(y.dims, order="F")
    for r, blk in enumerate(y.blocks):
        out[y.local_slices(r)] = blk.data
    return DenseTensor._wrap(out)


@dataclass
class DistFactorMatrix:
    """``K x J`` matrix split into column blocks over mode ``mode`` of the grid.

    ``blocks[rank]`` is the row-major ``K x J_p`` block for the rank's
    mode-``mode`` coordinate ``p``; ranks sharing ``p`` hold identical copies.
    """

    shape: tuple
    grid: ProcessGrid
    mode: int
    blocks: list

    @classmethod
    def from_matrix(cls, v, grid, mode: int) -> "DistFactorMatrix":
        v = np.asarray(v, dtype=np.float64)
        grid = _as_grid(grid)
        _check_partition(v.shape[1], grid.pdims[mode], "matrix column dimension")
        blocks = []
        for r in range(grid.size):
            a, b = block_range(v.shape[1], grid.pdims[mode], grid.coords(r)[mode])
            blocks.append(np.ascontiguousarray(v[:, a:b]))
        return cls(tuple(v.shape), grid, mode, blocks)

    def gather(self) -> np.ndarray:
        """Assemble the global matrix from the column-block owners of coordinate 0 elsewhere."""
        parts = []
        c = [0] * self.grid.ndim
        for p in range(self.grid.pdims[self.mode]):
            c[self.mode] = p
            parts.append(self.blocks[self.grid.rank(c)])
        return np.concatenate(parts, axis=1)

    def replicas_consistent(self) -> bool:
        ref = {}
        for r, blk in enumerate(self.blocks):
            p = self.grid.coords(r)[self.mode]
            if p in ref:
                if ref[p].shape != blk.shape or not np.array_equal(ref[p], blk):
                    return False
            else:
                ref[p] = blk
        return True


@dataclass
class DistTuckerModel:
    """Distributed core plus transposed factors ``U_n^T`` in column-block layout."""

    core: DistTensor
    factors: list
    original_norm: float
    fit_history: list = field(default_factory=list)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(self.core.dims)

    def gather(self) -> TuckerModel:
        return TuckerModel(
            core=gather(self.core),
            factors=[np.ascontiguousarray(f.gather().T) for f in self.factors],
            original_norm=self.original_norm,
            fit_history=list(self.fit_history),
        )


# per-rank kernels --------------------------------------------------------

def _mode_slab(t: DenseTensor, n: int, a: int, b: int) -> DenseTensor:
    idx = [slice(None)] * t.ndim
    idx[n] = slice(a, b)
    return DenseTensor(t.data[tuple(idx)])


def ttm_local(ctx: RankContext, ybar: DenseTensor, vbar: np.ndarray, n: int, jn: int,
              out: str | None = None, consume: str | None = None) -> DenseTensor:
    """One rank's share of ``Z = Y x_n V`` for a ``K x J_n`` matrix ``V``.

    ``vbar`` is the rank's ``K x (J_n / P_n)`` column block.  Output block
    rows are produced one at a time and summed over the processor column
    with a reduce rooted at the owning rank.  When ``K < J_n / P_n`` a single
    local multiply is done first and its row slabs are reduced instead.

    ``out`` names the result in the rank's memory tracker; ``consume`` names
    a tracked input that may be dropped once it has been read.
    """
    mem = ctx.memory
    grid = ctx.grid
    pn = grid.pdims[n]
    k = vbar.shape[0]
    if vbar.shape[1] != ybar.dims[n]:
        raise ValueError(f"matrix block with {vbar.shape[1]} columns does not match "
                         f"local mode-{n} size {ybar.dims[n]}")
    _check_partition(k, pn, "TTM output dimension")
    if pn == 1:
        z = ttm(ybar, vbar, n)
        if out:
            mem.hold(out, z.size)
        if consume:
            mem.release(consume)
        return z

    col = grid.column(ctx.rank, n)
    me = grid.coords(ctx.rank)[n]
    cols = ybar.size // ybar.dims[n]
    z = None
    if k * pn < jn:
        w = ttm(ybar, vbar, n)
        mem.hold("ttm.W", w.size)
        if consume:
            mem.release(consume)
            consume = None
        for ell in range(pn):
            a, b = block_range(k, pn, ell)
            part = _mode_slab(w, n, a, b)
            res = ctx.reduce(col, part.values, ell)
            if ell == me:
                z = DenseTensor.from_values(res, part.dims)
                if out:
                    mem.hold(out, z.size)
        mem.release("ttm.W")
    else:
        for ell in range(pn):
            a, b = block_range(k, pn, ell)
            w = ttm(ybar, vbar[a:b], n)
            mem.hold("ttm.W", (b - a) * cols)
            res = ctx.reduce(col, w.values, ell)
            if ell == me:
                z = DenseTensor.from_values(res, w.dims)
                if out:
                    mem.hold(out, z.size)
            mem.release("ttm.W")
    if consume:
        mem.release(consume)
    return z


def gram_local(ctx: RankContext, ybar: DenseTensor, n: int, jn: int,
               out: str | None = None) -> np.ndarray:
    """One rank's column block of ``S = Y_(n) Y_(n)^T`` (``J_n x J_n/P_n``).

    Local tensors circulate around the processor column so each rank forms
    its block row of the partial Gram matrix; an all-reduce over the ranks
    sharing the mode-``n`` coordinate then sums the partial results.
    """
    mem = ctx.memory
    grid = ctx.grid
    pn = grid.pdims[n]
    me = grid.coords(ctx.rank)[n]
    mine = block_range(jn, pn, me)
    v = np.empty((mine[1] - mine[0], jn))
    mem.hold("gram.V", v.size)
    v[:, mine[0]:mine[1]] = gram(ybar, n)
    if pn > 1:
        col = grid.column(ctx.rank, n)
        for i in range(1, pn):
            j = (me - i) % pn
            k = (me + i) % pn
            tag = ("gram", n, i)
            ctx.send(col.members[j], ybar.values, tag)
            a, b = block_range(jn, pn, k)
            wdims = ybar.dims[:n] + (b - a,) + ybar.dims[n + 1:]
            mem.hold("gram.W", int(np.prod(wdims)))
            w = DenseTensor.from_values(ctx.recv(col.members[k], tag), wdims)
            v[:, a:b] = gram(ybar, n, other=w)
            mem.release("gram.W")
    # block row of the symmetric partial sum, sent as the matching column block
    sbar = ctx.all_reduce(grid.row(ctx.rank, n), np.ascontiguousarray(v.T))
    if out:
        mem.rename("gram.V", out)
    else:
        mem.release("gram.V")
    return sbar


@dataclass
class LocalEig:
    vbar: np.ndarray
    eigenvalues: np.ndarray
    rank: int


def eigenvectors_local(ctx: RankContext, sbar: np.ndarray, n: int, rank: int | None = None,
                       tail_budget: float | None = None, out: str | None = None,
                       consume: str | None = None) -> LocalEig:
    """Leading eigenvectors of the distributed Gram matrix, returned as ``U^T`` blocks.

    The column blocks are all-gathered over the processor column, every rank
    solves the same eigenproblem, and keeps the columns of ``U^T`` matching
    its mode-``n`` slice.  Give either ``rank`` or ``tail_budget`` (the
    per-mode ``eps^2 ||X||^2 / N`` allowance).
    """
    mem = ctx.memory
    grid = ctx.grid
    pn = grid.pdims[n]
    jn = sbar.shape[0]
    if pn > 1:
        s = ctx.all_gather(grid.column(ctx.rank, n), sbar, axis=1)
        mem.hold("eig.S", s.size)
        if consume:
            mem.release(consume)
    else:
        s = sbar
        if consume:
            mem.rename(consume, "eig.S")
        else:
            mem.hold("eig.S", s.size)
    full = eig_leading(s)
    w = full.eigenvalues
    if rank is None:
        if tail_budget is None:
            raise ValueError("either rank or tail_budget is required")
        rank = choose_rank(w, tail_budget, 1.0, 1, noise_floor(w))
    u = full.vectors[:, :rank]
    mem.hold("eig.U", u.size)
    a, b = block_range(jn, pn, grid.coords(ctx.rank)[n])
    vbar = np.ascontiguousarray(u[a:b].T)
    if out:
        mem.hold(out, vbar.size)
    mem.release("eig.U")
    mem.release("eig.S")
    return LocalEig(vbar, w, rank)


def _world(ctx: RankContext) -> Group:
    return Group(tuple(range(ctx.grid.size)))


def _norm_sq_local(ctx: RankContext, t: DenseTensor) -> float:
    v = t.values
    return float(ctx.all_reduce(_world(ctx), np.array([np.dot(v, v)]))[0])


# global-view wrappers ----------------------------------------------------

def _harness_for(grid: ProcessGrid, harness: Harness | None) -> Harness:
    if harness is None:
        return Harness(grid)
    if harness.grid != grid:
        raise ValueError(f"harness grid {harness.grid} does not match data grid {grid}")
    return harness


def par_ttm(y: DistTensor, v: DistFactorMatrix, n: int, harness: Harness | None = None) -> DistTensor:
    """Distributed ``Y x_n V`` for ``V`` of shape ``K x J_n`` distributed over mode ``n``."""
    h = _harness_for(y.grid, harness)
    if v.mode != n or v.shape[1] != y.dims[n]:
        raise ValueError(f"matrix of shape {v.shape} over mode {v.mode} does not conform "
                         f"to mode {n} of dims {y.dims}")
    blocks = h.run(lambda ctx: ttm_local(ctx, y.blocks[ctx.rank], v.blocks[ctx.rank], n, y.dims[n]))
    dims = y.dims[:n] + (v.shape[0],) + y.dims[n + 1:]
    return DistTensor(dims, y.grid, blocks)


def par_gram(y: DistTensor, n: int, harness: Harness | None = None) -> DistFactorMatrix:
    """Distributed Gram matrix of the mode-``n`` unfolding (column blocks over mode ``n``)."""
    h = _harness_for(y.grid, harness)
    blocks = h.run(lambda ctx: gram_local(ctx, y.blocks[ctx.rank], n, y.dims[n]))
    return DistFactorMatrix((y.dims[n], y.dims[n]), y.grid, n, blocks)


def par_eigenvectors(s: DistFactorMatrix, rank: int, harness: Harness | None = None) -> DistFactorMatrix:
    """Leading ``rank`` eigenvectors of ``s`` as a distributed ``rank x J_n`` matrix ``U^T``."""
    h = _harness_for(s.grid, harness)
    res = h.run(lambda ctx: eigenvectors_local(ctx, s.blocks[ctx.rank], s.mode, rank=rank).vbar)
    return DistFactorMatrix((rank, s.shape[0]), s.grid, s.mode, res)


def _sthosvd_local(ctx: RankContext, xbar: DenseTensor, dims: tuple, opts: DecomposeOptions):
    mem = ctx.memory
    nmodes = len(dims)
    nsq = _norm_sq_local(ctx, xbar)
    if isinstance(opts.mode_order, str) and opts.mode_order != "natural":
        est = opts.ranks
        if est is None:
            est = []
            for n in range(nmodes):
                sbar = gram_local(ctx, xbar, n, dims[n])
                est.append(eigenvectors_local(
                    ctx, sbar, n, tail_budget=opts.epsilon ** 2 * nsq / nmodes).rank)
        order = order_modes(dims, est, opts.mode_order)
    else:
        order = order_modes(dims, None, opts.mode_order)

    ybar = xbar
    cur = list(dims)
    factors: list = [None] * nmodes
    mem.hold("Y", ybar.size)
    for n in order:
        sbar = gram_local(ctx, ybar, n, cur[n], out="S_bar")
        kw = {"rank": int(opts.ranks[n])} if opts.ranks is not None else \
            {"tail_budget": opts.epsilon ** 2 * nsq / nmodes}
        eig = eigenvectors_local(ctx, sbar, n, out=f"U{n}", consume="S_bar", **kw)
        factors[n] = eig.vbar
        ybar = ttm_local(ctx, ybar, eig.vbar, n, cur[n], out="Z", consume="Y")
        mem.rename("Z", "Y")
        cur[n] = eig.rank
    gsq = _norm_sq_local(ctx, ybar)
    return ybar, factors, nsq, gsq


def _assemble(grid: ProcessGrid, results, ranks, dims, nsq, history) -> DistTuckerModel:
    core = DistTensor(tuple(ranks), grid, [r[0] for r in results])
    factors = [
        DistFactorMatrix((ranks[n], dims[n]), grid, n, [r[1][n] for r in results])
        for n in range(len(dims))
    ]
    return DistTuckerModel(core, factors, float(np.sqrt(nsq)), history)


def par_sthosvd(x: DistTensor, opts: DecomposeOptions | None = None,
                harness: Harness | None = None, **kwargs) -> DistTuckerModel:
    """ST-HOSVD on a distributed tensor; same contract as :func:`~partucker.decompose.sthosvd`."""
    opts = opts if opts is not None else DecomposeOptions(**kwargs)
    h = _harness_for(x.grid, harness)
    results = h.run(lambda ctx: _sthosvd_local(ctx, x.blocks[ctx.rank], tuple(x.dims), opts))
    ranks = tuple(f.shape[0] for f in results[0][1])
    nsq, gsq = results[0][2], results[0][3]
    return _assemble(x.grid, results, ranks, x.dims, nsq, [nsq - gsq])


def _hooi_local(ctx: RankContext, xbar: DenseTensor, dims: tuple, opts: DecomposeOptions):
    gbar, factors, nsq, gsq = _sthosvd_local(ctx, xbar, dims, opts)
    nmodes = len(dims)
    ranks = [f.shape[0] for f in factors]
    history = [nsq - gsq]
    last = nmodes - 1
    for _ in range(opts.max_hooi_iters):
        for n in range(nmodes):
            y = xbar
            cur = list(dims)
            for m in range(nmodes):
                if m == n:
                    continue
                y = ttm_local(ctx, y, factors[m], m, cur[m])
                cur[m] = ranks[m]
            sbar = gram_local(ctx, y, n, dims[n])
            factors[n] = eigenvectors_local(ctx, sbar, n, rank=ranks[n]).vbar
        gbar = ttm_local(ctx, y, factors[last], last, dims[last])
        fit = nsq - _norm_sq_local(ctx, gbar)
        decrease = history[-1] - fit
        history.append(fit)
        if decrease < opts.hooi_rel_tol * nsq:
            break
    return gbar, factors, nsq, history


def par_hooi(x: DistTensor, opts: DecomposeOptions | None = None,
             harness: Harness | None = None, **kwargs) -> DistTuckerModel:
    """HOOI on a distributed tensor, initialized by the distributed ST-HOSVD.

    The core of each sweep comes from the last working tensor, which already
    carries the products in every mode but the final one.
    """
    opts = opts if opts is not None else DecomposeOptions(**kwargs)
    h = _harness_for(x.grid, harness)
    results = h.run(lambda ctx: _hooi_local(ctx, x.blocks[ctx.rank], tuple(x.dims), opts))
    ranks = tuple(f.shape[0] for f in results[0][1])
    return _assemble(x.grid, results, ranks, x.dims, results[0][2], results[0][3])


def memory_bound(dims: Sequence[int], ranks: Sequence[int], pdims: Sequence[int]) -> int:
    """Per-rank word bound for ST-HOSVD with block sizes rounded up.

    ``2 I/P + sum_n R_n I_n/P_n + max_n I_n^2 + max_n R_n I_n`` where the
    ``/P`` terms use the largest local block.
    """
    local = 1
    for d, p in zip(dims, pdims):
        local *= -(-d // p)
    fac = sum(r * -(-d // p) for d, r, p in zip(dims, ranks, pdims))
    return 2 * local + fac + max(d * d for d in dims) + max(r * d for d, r in zip(dims, ranks))
