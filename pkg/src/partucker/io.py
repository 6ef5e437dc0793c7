"""Binary tensor and model files, and seeded synthetic data.

Both formats are little-endian.  A tensor file is::

    b"DTNS" | u32 version | u32 N | N x u64 dims | prod(dims) x f64 (first index fastest)

A model file is::

    b"DTKR" | u32 version | u32 N | N x u64 dims | N x u64 ranks | f64 norm
    | u32 has_scaling [| u32 mode | I x f64 means | I x f64 stds | I x u8 divided]
    | core (f64, first index fastest) | factors in mode order (f64, row-major I_n x R_n)
"""

from __future__ import annotations

import math
import os
import struct

import numpy as np

from .analysis import ScalingRecord
from .decompose import TuckerModel
from .tensor import DenseTensor, as_tensor, ttm_chain

TENSOR_MAGIC = b"DTNS"
MODEL_MAGIC = b"DTKR"
VERSION = 1

_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Malformed tensor or model file."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, nbytes: int, what: str) -> bytes:
        end = self.pos + nbytes
        if end > len(self.buf):
            raise TruncatedFileError(
                f"{self.path}: truncated while reading {what} "
                f"(need {nbytes} bytes at offset {self.pos}, file has {len(self.buf)})"
            )
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype=_F64).astype(np.float64)

    def header(self, magic: bytes):
        got = self.buf[:4]
        if got != magic:
            raise BadMagicError(f"{self.path}: bad magic {got!r}, expected {magic!r}")
        self.pos = 4
        (version,) = self.unpack("<I", "version")
        if version != VERSION:
            raise VersionMismatchError(f"{self.path}: format version {version}, expected {VERSION}")
        (n,) = self.unpack("<I", "order")
        if n == 0:
            raise FormatError(f"{self.path}: tensor order must be at least 1")
        dims = self.unpack(f"<{n}Q", "dims")
        if any(d == 0 for d in dims):
            raise FormatError(f"{self.path}: zero dimension in {dims}")
        return n, tuple(int(d) for d in dims)

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def _f64_bytes(a: np.ndarray, order: str) -> bytes:
    return np.asarray(a, dtype=_F64).tobytes(order=order)


def _write(path, parts):
    with open(path, "wb") as f:
        for p in parts:
            f.write(p)


def write_tensor(path, x) -> None:
    x = as_tensor(x)
    head = TENSOR_MAGIC + struct.pack("<II", VERSION, x.ndim) + struct.pack(f"<{x.ndim}Q", *x.dims)
    _write(path, [head, _f64_bytes(x.data, "F")])


def read_tensor(path) -> DenseTensor:
    with open(path, "rb") as f:
        r = _Reader(f.read(), os.fspath(path))
    _, dims = r.header(TENSOR_MAGIC)
    body = r.floats(math.prod(dims), "tensor body")
    r.done()
    return DenseTensor._wrap(body.reshape(dims, order="F"))


def write_model(path, model: TuckerModel) -> None:
    n = model.ndim
    parts = [
        MODEL_MAGIC,
        struct.pack("<II", VERSION, n),
        struct.pack(f"<{n}Q", *model.dims),
        struct.pack(f"<{n}Q", *model.ranks),
        struct.pack("<d", float(model.original_norm)),
    ]
    rec = model.scaling
    if rec is None:
        parts.append(struct.pack("<I", 0))
    else:
        parts.append(struct.pack("<II", 1, rec.variable_mode))
        parts += [_f64_bytes(rec.means, "C"), _f64_bytes(rec.stds, "C"),
                  np.asarray(rec.divided, dtype=np.uint8).tobytes()]
    parts.append(_f64_bytes(model.core.data, "F"))
    for u in model.factors:
        parts.append(_f64_bytes(u, "C"))
    _write(path, parts)


def read_model(path) -> TuckerModel:
    with open(path, "rb") as f:
        r = _Reader(f.read(), os.fspath(path))
    n, dims = r.header(MODEL_MAGIC)
    ranks = tuple(int(v) for v in r.unpack(f"<{n}Q", "ranks"))
    if any(not 1 <= q <= d for d, q in zip(dims, ranks)):
        raise FormatError(f"{r.path}: ranks {ranks} inconsistent with dims {dims}")
    (norm,) = r.unpack("<d", "norm")
    (flag,) = r.unpack("<I", "scaling flag")
    scaling = None
    if flag == 1:
        (mode,) = r.unpack("<I", "variable mode")
        if mode >= n:
            raise FormatError(f"{r.path}: variable mode {mode} out of range")
        size = dims[mode]
        means = r.floats(size, "scaling means")
        stds = r.floats(size, "scaling stds")
        divided = np.frombuffer(r.take(size, "scaling flags"), dtype=np.uint8).astype(bool)
        scaling = ScalingRecord(mode, means, stds, divided)
    elif flag != 0:
        raise FormatError(f"{r.path}: bad scaling flag {flag}")
    core = r.floats(math.prod(ranks), "core").reshape(ranks, order="F")
    factors = [r.floats(d * q, f"factor {k}").reshape(d, q) for k, (d, q) in enumerate(zip(dims, ranks))]
    r.done()
    return TuckerModel(DenseTensor._wrap(core), factors, norm, scaling)


def generate_synthetic(dims, ranks, noise: float = 0.0, seed: int = 0) -> DenseTensor:
    """``G x {U_n} + noise * ||G x {U_n}|| / sqrt(I) * E``.

    ``G`` and ``E`` are standard normal, and each ``U_n`` has orthonormal
    columns from the QR factorization of a Gaussian matrix.
    """
    dims = tuple(int(d) for d in dims)
    ranks = tuple(int(r) for r in ranks)
    if len(dims) != len(ranks) or any(not 1 <= r <= d for d, r in zip(dims, ranks)):
        raise ValueError(f"ranks {ranks} must lie in 1..dims {dims}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(seed)
    core = DenseTensor._wrap(np.asfortranarray(rng.standard_normal(ranks)))
    mats = []
    for n, (d, r) in enumerate(zip(dims, ranks)):
        q, _ = np.linalg.qr(rng.standard_normal((d, r)))
        mats.append((q, n))
    x = ttm_chain(core, mats)
    if noise == 0:
        return x
    e = rng.standard_normal(dims)
    scale = noise * x.norm() / math.sqrt(x.size)
    return DenseTensor(x.data + scale * e)
