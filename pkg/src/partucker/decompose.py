"""Sequential ST-HOSVD and HOOI, rank selection, and reconstruction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import DenseTensor, as_tensor, gram, ttm, ttm_chain

log = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps

MODE_ORDER_STRATEGIES = ("natural", "greedy-flops", "max-ratio")
_STRATEGY_ALIASES = {"max-compression-ratio": "max-ratio"}


@dataclass
class EigResult:
    """Eigenpairs sorted by decreasing eigenvalue.

    ``eigenvalues`` always holds the full spectrum; ``vectors`` holds only the
    requested leading columns.
    """

    eigenvalues: np.ndarray
    vectors: np.ndarray


@dataclass
class DecomposeOptions:
    epsilon: float = 0.0
    mode_order: str | Sequence[int] = "natural"
    max_hooi_iters: int = 25
    hooi_rel_tol: float = 1e-6
    ranks: Sequence[int] | None = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.max_hooi_iters < 0:
            raise ValueError(f"max_hooi_iters must be >= 0, got {self.max_hooi_iters}")
        if isinstance(self.mode_order, str):
            tag = _STRATEGY_ALIASES.get(self.mode_order, self.mode_order)
            if tag not in MODE_ORDER_STRATEGIES:
                raise ValueError(f"unknown mode order strategy {self.mode_order!r}")
            self.mode_order = tag
        else:
            self.mode_order = tuple(int(m) for m in self.mode_order)


@dataclass
class TuckerModel:
    """Core tensor plus one factor per mode (``factors[n]`` is ``I_n x R_n``)."""

    core: DenseTensor
    factors: list
    original_norm: float
    scaling: object = None
    fit_history: list = field(default_factory=list)

    @property
    def ndim(self) -> int:
        return self.core.ndim

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(u.shape[0] for u in self.factors)

    @property
    def ranks(self) -> tuple[int, ...]:
        return self.core.dims


def sign_fix(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so that each column's largest-magnitude entry is positive."""
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    vectors *= signs
    return vectors


def jacobi_eigh(s, tol: float = 1e-15, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns ``(w, v)`` in ascending eigenvalue order, matching
    :func:`numpy.linalg.eigh`.
    """
    a = np.array(s, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - sn * aq
                a[q, :] = sn * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def eig_leading(s, count: int | None = None, method: str = "lapack") -> EigResult:
    """Leading eigenpairs of a symmetric matrix.

    The full spectrum is returned in ``eigenvalues`` (for rank selection);
    ``vectors`` keeps the leading ``count`` columns, or all of them when
    ``count`` is None.  Columns follow the positive-largest-entry sign rule.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"square matrix expected, got shape {s.shape}")
    scale = np.max(np.abs(s)) if s.size else 0.0
    if np.max(np.abs(s - s.T), initial=0.0) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric within 1e-12 relative")
    if method == "lapack":
        w, v = np.linalg.eigh(s)
    elif method == "jacobi":
        w, v = jacobi_eigh(s)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    w = w[::-1].copy()
    v = v[:, ::-1]
    if count is not None:
        if not 0 <= count <= s.shape[0]:
            raise ValueError(f"cannot take {count} eigenvectors of a {s.shape[0]}x{s.shape[0]} matrix")
        v = v[:, :count]
    return EigResult(w, sign_fix(v))


def noise_floor(eigenvalues) -> float:
    """Level below which a Gram eigenvalue is indistinguishable from round-off."""
    w = np.asarray(eigenvalues)
    if w.size == 0:
        return 0.0
    return float(w.size * EPS * max(w[0], 0.0))


def tail_sums(eigenvalues, floor: float = 0.0) -> np.ndarray:
    """``t[R] = sum(eigenvalues[R:])`` for ``R = 0..len``, clipping round-off."""
    w = np.asarray(eigenvalues, dtype=np.float64)
    w = np.where(w <= floor, 0.0, w)
    t = np.zeros(w.size + 1)
    t[:-1] = np.cumsum(w[::-1])[::-1]
    return t


def choose_rank(eigenvalues, tensor_norm_sq: float, epsilon: float, nmodes: int,
                floor: float = 0.0) -> int:
    """Smallest ``R >= 1`` whose discarded tail is within ``eps^2 ||X||^2 / N``.

    Eigenvalues at or below ``floor`` (and small negatives) count as zero.
    """
    w = np.asarray(eigenvalues, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty eigenvalue list")
    if np.any(np.diff(w) > 1e-12 * max(abs(w[0]), 1e-300)):
        raise ValueError("eigenvalues must be non-increasing")
    if w[-1] < -1e-12 * max(w[0], 0.0) and w[-1] < -floor:
        raise ValueError(f"eigenvalue {w[-1]} is too negative for a Gram matrix")
    budget = epsilon ** 2 * tensor_norm_sq / nmodes
    tails = tail_sums(w, floor)
    for r in range(1, w.size + 1):
        if tails[r] <= budget:
            return r
    return w.size


def order_modes(dims: Sequence[int], ranks: Sequence[int] | None, strategy) -> tuple[int, ...]:
    """Processing order of the modes for ST-HOSVD.

    ``strategy`` is ``"natural"``, ``"greedy-flops"``, ``"max-ratio"`` or an
    explicit permutation.  Ties go to the lower mode index.
    """
    n = len(dims)
    if not isinstance(strategy, str):
        perm = tuple(int(m) for m in strategy)
        if sorted(perm) != list(range(n)):
            raise ValueError(f"{perm} is not a permutation of modes 0..{n - 1}")
        return perm
    strategy = _STRATEGY_ALIASES.get(strategy, strategy)
    if strategy == "natural":
        return tuple(range(n))
    if ranks is None or len(ranks) != n:
        raise ValueError(f"strategy {strategy!r} needs one estimated rank per mode")
    if strategy == "max-ratio":
        return tuple(sorted(range(n), key=lambda m: (-dims[m] / ranks[m], m)))
    if strategy == "greedy-flops":
        cur = list(dims)
        left = list(range(n))
        perm = []
        while left:
            size = int(np.prod(cur, dtype=np.int64))

            def step_flops(m):
                # Gram + TTM + eigensolver of the current step
                return 2 * dims[m] * size + 2 * ranks[m] * size + 10 * dims[m] ** 3 / 3

            best = min(left, key=lambda m: (step_flops(m), m))
            perm.append(best)
            left.remove(best)
            cur[best] = ranks[best]
        return tuple(perm)
    raise ValueError(f"unknown mode order strategy {strategy!r}")


def estimate_ranks(x, epsilon: float) -> tuple[int, ...]:
    """Per-mode ranks from the spectra of the unprocessed tensor (T-HOSVD rule)."""
    x = as_tensor(x)
    nsq = _norm_sq(x)
    out = []
    for n in range(x.ndim):
        w = eig_leading(gram(x, n), 0).eigenvalues
        out.append(choose_rank(w, nsq, epsilon, x.ndim, noise_floor(w)))
    return tuple(out)


def resolve_mode_order(x, opts: DecomposeOptions) -> tuple[int, ...]:
    x = as_tensor(x)
    if isinstance(opts.mode_order, str) and opts.mode_order != "natural":
        ranks = opts.ranks if opts.ranks is not None else estimate_ranks(x, opts.epsilon)
        return order_modes(x.dims, ranks, opts.mode_order)
    return order_modes(x.dims, None, opts.mode_order)


def _options(opts, kwargs) -> DecomposeOptions:
    if opts is None:
        return DecomposeOptions(**kwargs)
    if kwargs:
        raise TypeError("pass either a DecomposeOptions or keyword options, not both")
    return opts


def sthosvd(x, opts: DecomposeOptions | None = None, **kwargs) -> TuckerModel:
    """Sequentially truncated HOSVD.

    For each mode in the chosen order: form the Gram matrix of the working
    tensor, pick the rank from its spectrum, keep the leading eigenvectors and
    shrink the working tensor by the transposed factor.
    """
    opts = _options(opts, kwargs)
    x = as_tensor(x)
    nsq = _norm_sq(x)
    order = resolve_mode_order(x, opts)
    factors = [None] * x.ndim
    y = x
    for n in order:
        full = eig_leading(gram(y, n))
        w = full.eigenvalues
        if opts.ranks is not None:
            r = int(opts.ranks[n])
        else:
            r = choose_rank(w, nsq, opts.epsilon, x.ndim, noise_floor(w))
        u = full.vectors[:, :r]
        factors[n] = np.ascontiguousarray(u)
        y = ttm(y, np.ascontiguousarray(u.T), n)
        log.debug("mode %d: rank %d, working dims %s", n, r, y.dims)
    return TuckerModel(core=y, factors=factors, original_norm=float(np.sqrt(nsq)),
                       fit_history=[nsq - _norm_sq(y)])


def _norm_sq(t) -> float:
    v = as_tensor(t).values
    return float(np.dot(v, v))


def hooi(x, opts: DecomposeOptions | None = None, **kwargs) -> TuckerModel:
    """Higher-order orthogonal iteration started from :func:`sthosvd`.

    Ranks stay fixed at the initial values.  ``fit_history`` records
    ``||X||^2 - ||G||^2`` for the initialization and after every sweep.
    """
    opts = _options(opts, kwargs)
    x = as_tensor(x)
    model = sthosvd(x, opts)
    nsq = model.original_norm ** 2
    ranks = model.ranks
    factors = list(model.factors)
    core = model.core
    history = list(model.fit_history)
    last = x.ndim - 1
    for it in range(opts.max_hooi_iters):
        for n in range(x.ndim):
            y = ttm_chain(x, [(np.ascontiguousarray(factors[m].T), m)
                              for m in range(x.ndim) if m != n])
            u = eig_leading(gram(y, n)).vectors[:, :ranks[n]]
            factors[n] = np.ascontiguousarray(u)
        core = ttm(y, np.ascontiguousarray(factors[last].T), last)
        fit = nsq - _norm_sq(core)
        decrease = history[-1] - fit
        history.append(fit)
        log.debug("hooi sweep %d: fit %.6g (decrease %.3g)", it + 1, fit, decrease)
        if decrease < opts.hooi_rel_tol * nsq:
            break
    return TuckerModel(core=core, factors=factors, original_norm=model.original_norm,
                       fit_history=history)


def _row_selection(sel, size: int, mode: int) -> np.ndarray:
    if sel is None:
        return np.arange(size)
    if isinstance(sel, slice):
        start, stop, step = sel.indices(size)
        if sel.start is not None and not 0 <= sel.start <= size or \
                sel.stop is not None and not 0 <= sel.stop <= size:
            raise IndexError(f"range {sel} out of bounds for mode {mode} of size {size}")
        rows = np.arange(start, stop, step)
    else:
        rows = np.atleast_1d(np.asarray(sel, dtype=np.int64))
    if rows.size == 0:
        raise IndexError(f"empty selection for mode {mode}")
    if rows.min() < 0 or rows.max() >= size:
        raise IndexError(f"selection out of bounds for mode {mode} of size {size}")
    return rows


def reconstruct(model: TuckerModel, ranges=None) -> DenseTensor:
    """``G x {U_n}``, optionally restricted to selected rows of each factor.

    ``ranges`` is a sequence with one entry per mode, or a ``{mode: entry}``
    mapping; an entry is None (whole mode), a slice, an int or a list of
    indices.  Only the requested entries are computed.
    """
    n = model.ndim
    if ranges is None:
        ranges = [None] * n
    elif isinstance(ranges, dict):
        bad = [m for m in ranges if not 0 <= m < n]
        if bad:
            raise IndexError(f"modes {bad} out of range")
        ranges = [ranges.get(m) for m in range(n)]
    elif len(ranges) != n:
        raise IndexError(f"expected {n} ranges, got {len(ranges)}")
    mats = []
    for m, (u, sel) in enumerate(zip(model.factors, ranges)):
        rows = _row_selection(sel, u.shape[0], m)
        mats.append((u[rows, :], m))
    return ttm_chain(model.core, mats)


def fit_error_sq(model: TuckerModel) -> float:
    """``||X||^2 - ||G||^2``, the squared residual for orthonormal factors."""
    return model.original_norm ** 2 - _norm_sq(model.core)
