"""Dense N-way tensors and the sequential kernels built on them.

Storage is the linearization in which the first index varies fastest, so the
mode-0 unfolding of a tensor is a column-major matrix.  Every other unfolding
is read directly from the same buffer as a stack of row-major sub-blocks:
for mode ``n`` there are ``prod(dims[n+1:])`` blocks, each of shape
``dims[n] x prod(dims[:n])``.  Kernels multiply block by block on that view
and never build a permuted copy of the data.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class DenseTensor:
    """Immutable dense tensor of 64-bit floats.

    Parameters
    ----------
    data : array_like
        Values indexed as ``data[i_0, ..., i_{N-1}]``.  The array is copied
        into first-index-fastest (Fortran) order.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="F", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"every dimension must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "DenseTensor":
        # Takes ownership of a freshly computed Fortran-contiguous array.
        obj = cls.__new__(cls)
        if not arr.flags.f_contiguous or arr.dtype != np.float64:
            arr = np.asfortranarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        obj._data = arr
        return obj

    @classmethod
    def from_values(cls, values, dims: Sequence[int]) -> "DenseTensor":
        """Build a tensor from a flat buffer in first-index-fastest order."""
        dims = tuple(int(d) for d in dims)
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != int(np.prod(dims)):
            raise ValueError(f"buffer of length {values.size} does not match dims {dims}")
        return cls(values.reshape(dims, order="F"))

    @property
    def data(self) -> np.ndarray:
        """Read-only Fortran-ordered view of the values."""
        return self._data

    @property
    def dims(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def values(self) -> np.ndarray:
        """Flat buffer, first index fastest (no copy)."""
        return self._data.reshape(-1, order="F")

    def norm(self) -> float:
        return norm(self)

    def __repr__(self) -> str:
        return f"DenseTensor(dims={self.dims})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self._data, other._data)

    __hash__ = None


def as_tensor(x) -> DenseTensor:
    if isinstance(x, DenseTensor):
        return x
    return DenseTensor(x)


def _check_mode(n: int, ndim: int) -> int:
    if not isinstance(n, (int, np.integer)) or not 0 <= n < ndim:
        raise IndexError(f"mode {n} out of range for a {ndim}-way tensor")
    return int(n)


def unfold_map(dims: Sequence[int], n: int, idx: Sequence[int]) -> tuple[int, int]:
    """Position of tensor entry ``idx`` in the mode-``n`` unfolding.

    Indices and modes are zero-based.  The row is ``idx[n]``; the column is the
    first-index-fastest linearization of the remaining indices taken in
    increasing mode order.
    """
    dims = tuple(dims)
    n = _check_mode(n, len(dims))
    if len(idx) != len(dims):
        raise IndexError(f"index {tuple(idx)} has wrong length for dims {dims}")
    for i, d in zip(idx, dims):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(idx)} out of range for dims {dims}")
    col = 0
    stride = 1
    for k, (i, d) in enumerate(zip(idx, dims)):
        if k == n:
            continue
        col += i * stride
        stride *= d
    return int(idx[n]), col


class UnfoldingView:
    """Logical mode-``n`` unfolding of a tensor.

    ``blocks`` is a ``(ncols_outer, dims[n], ncols_inner)`` view on the
    tensor's buffer: block ``r`` is the row-major ``dims[n] x prod(dims[:n])``
    sub-block holding columns ``r*inner .. (r+1)*inner - 1`` of the unfolding.
    """

    def __init__(self, tensor, n: int):
        self.tensor = as_tensor(tensor)
        dims = self.tensor.dims
        self.mode = _check_mode(n, len(dims))
        self.inner = int(np.prod(dims[:n], dtype=np.int64))
        self.outer = int(np.prod(dims[n + 1:], dtype=np.int64))
        self.blocks = _block_view(self.tensor.data, self.mode)

    @property
    def shape(self) -> tuple[int, int]:
        return self.tensor.dims[self.mode], self.inner * self.outer

    def to_matrix(self) -> np.ndarray:
        """Materialize the unfolding (copies; intended for tests and small data)."""
        return np.concatenate(list(self.blocks), axis=1) if self.outer else np.empty(self.shape)


def _block_view(arr: np.ndarray, n: int) -> np.ndarray:
    dims = arr.shape
    inner = int(np.prod(dims[:n], dtype=np.int64))
    outer = int(np.prod(dims[n + 1:], dtype=np.int64))
    if not arr.flags.f_contiguous:
        raise ValueError("tensor buffer is not first-index-fastest contiguous")
    return arr.reshape(-1, order="F").reshape(outer, dims[n], inner)


def norm(x) -> float:
    """Frobenius norm of a tensor."""
    v = as_tensor(x).values
    return float(np.sqrt(np.dot(v, v)))


def ttm(x, v, n: int, transpose: bool = False) -> DenseTensor:
    """Mode-``n`` product ``x ×_n v`` (``x ×_n v.T`` when ``transpose``).

    Computes ``Y_(n) = V X_(n)`` with one dense multiply per sub-block of the
    unfolding view.
    """
    x = as_tensor(x)
    n = _check_mode(n, x.ndim)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"matrix expected, got array of shape {v.shape}")
    if transpose:
        v = v.T
    dims = x.dims
    if v.shape[1] != dims[n]:
        raise ValueError(
            f"matrix with {v.shape[1]} columns cannot multiply mode {n} of size {dims[n]}"
        )
    k = v.shape[0]
    out_dims = dims[:n] + (k,) + dims[n + 1:]
    blocks = _block_view(x.data, n)
    if blocks.shape[2] == 1:
        # mode 0: one multiply on the column-major unfolding
        out = blocks[:, :, 0] @ v.T
    else:
        out = np.matmul(v, blocks)
    flat = np.ascontiguousarray(out).reshape(-1)
    return DenseTensor._wrap(flat.reshape(out_dims, order="F"))


def ttm_chain(x, mats: Iterable, order: Sequence[int] | None = None) -> DenseTensor:
    """Apply several mode products.

    ``mats`` holds ``(matrix, mode)`` or ``(matrix, mode, transpose)`` entries
    with distinct modes.  ``order`` lists those modes in the order the
    products are evaluated (default: as listed).
    """
    x = as_tensor(x)
    items = []
    for m in mats:
        if len(m) == 2:
            items.append((m[0], m[1], False))
        else:
            items.append(tuple(m))
    modes = [m for _, m, _ in items]
    if len(set(modes)) != len(modes):
        raise ValueError(f"duplicate modes in ttm chain: {modes}")
    by_mode = {m: item for item, m in zip(items, modes)}
    if order is None:
        order = modes
    elif sorted(order) != sorted(modes):
        raise ValueError(f"order {list(order)} is not a permutation of chain modes {modes}")
    y = x
    for mode in order:
        mat, _, tr = by_mode[mode]
        y = ttm(y, mat, mode, transpose=tr)
    return y


def gram(x, n: int, other=None) -> np.ndarray:
    """``X_(n) X_(n)^T`` accumulated over sub-blocks of the unfolding.

    With ``other`` the cross product ``X_(n) W_(n)^T`` is formed instead; both
    tensors must agree in every mode except ``n``.
    """
    x = as_tensor(x)
    n = _check_mode(n, x.ndim)
    a = _block_view(x.data, n)
    if other is None:
        b = a
    else:
        w = as_tensor(other)
        if w.ndim != x.ndim or any(
            dx != dw for k, (dx, dw) in enumerate(zip(x.dims, w.dims)) if k != n
        ):
            raise ValueError(f"dims {x.dims} and {w.dims} differ outside mode {n}")
        b = _block_view(w.data, n)
    outer, rows, inner = a.shape
    if inner == 1:
        # mode 0: the unfolding is a single column-major matrix
        am = a[:, :, 0].T
        bm = b[:, :, 0].T
        return am @ bm.T
    s = np.zeros((rows, b.shape[1]))
    for r in range(outer):
        s += a[r] @ b[r].T
    return s
