"""Preprocessing and error analytics for Tucker compression."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decompose import eig_leading, noise_floor, tail_sums
from .tensor import DenseTensor, _check_mode, as_tensor, gram

STD_THRESHOLD = 1e-10


@dataclass
class ScalingRecord:
    """Per-slice statistics used to normalize one "variable" mode.

    ``divided[i]`` is False when slice ``i`` had a standard deviation below
    ``STD_THRESHOLD`` and was only centered.
    """

    variable_mode: int
    means: np.ndarray
    stds: np.ndarray
    divided: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        self.divided = np.asarray(self.divided, dtype=bool)
        if not self.means.shape == self.stds.shape == self.divided.shape or self.means.ndim != 1:
            raise ValueError("means, stds and divided must be 1-D arrays of equal length")

    @classmethod
    def identity(cls, variable_mode: int, size: int) -> "ScalingRecord":
        return cls(variable_mode, np.zeros(size), np.ones(size), np.ones(size, dtype=bool))

    def __eq__(self, other):
        if not isinstance(other, ScalingRecord):
            return NotImplemented
        return (self.variable_mode == other.variable_mode
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.stds, other.stds)
                and np.array_equal(self.divided, other.divided))


def _slice_shape(ndim: int, mode: int) -> tuple[int, ...]:
    shape = [1] * ndim
    shape[mode] = -1
    return tuple(shape)


def center_scale(x, variable_mode: int) -> tuple[DenseTensor, ScalingRecord]:
    """Center each slice along ``variable_mode`` and divide by its std.

    Uses the population standard deviation; slices whose std is below
    ``STD_THRESHOLD`` are left undivided.
    """
    x = as_tensor(x)
    m = _check_mode(variable_mode, x.ndim)
    axes = tuple(k for k in range(x.ndim) if k != m)
    data = x.data
    means = data.mean(axis=axes)
    centered = data - means.reshape(_slice_shape(x.ndim, m))
    stds = np.sqrt((centered * centered).mean(axis=axes))
    divided = stds >= STD_THRESHOLD
    scale = np.where(divided, stds, 1.0)
    out = centered / scale.reshape(_slice_shape(x.ndim, m))
    return DenseTensor(out), ScalingRecord(m, means, stds, divided)


def inverse_center_scale(x, record: ScalingRecord) -> DenseTensor:
    """Undo ``center_scale`` given its record."""
    x = as_tensor(x)
    m = _check_mode(record.variable_mode, x.ndim)
    if x.dims[m] != record.means.size:
        raise ValueError(
            f"record holds {record.means.size} slices but mode {m} has size {x.dims[m]}"
        )
    shape = _slice_shape(x.ndim, m)
    scale = np.where(record.divided, record.stds, 1.0)
    return DenseTensor(x.data * scale.reshape(shape) + record.means.reshape(shape))


def compression_ratio(dims: Sequence[int], ranks: Sequence[int]) -> float:
    """Original entries over stored entries: ``prod I / (prod R + sum I R)``."""
    dims = [int(d) for d in dims]
    ranks = [int(r) for r in ranks]
    if len(dims) != len(ranks):
        raise ValueError(f"dims {dims} and ranks {ranks} differ in length")
    if any(not 1 <= r <= d for d, r in zip(dims, ranks)):
        raise ValueError(f"ranks {ranks} must lie in 1..dims {dims}")
    stored = int(np.prod(ranks, dtype=object)) + sum(d * r for d, r in zip(dims, ranks))
    return int(np.prod(dims, dtype=object)) / stored


@dataclass
class ErrorCurve:
    """Mode-wise error contribution as a function of the truncation rank.

    ``normalized_tail[R]`` is ``sqrt(sum_{i>R} eigenvalues[i]) / ||X||`` for
    ``R = 0..I_n``.
    """

    mode: int
    eigenvalues: np.ndarray
    normalized_tail: np.ndarray

    def rank_for(self, epsilon: float, nmodes: int) -> int:
        """Smallest ``R >= 1`` whose tail meets ``epsilon / sqrt(nmodes)``."""
        target = epsilon / np.sqrt(nmodes)
        ok = np.nonzero(self.normalized_tail[1:] <= target)[0]
        return int(ok[0]) + 1 if ok.size else self.eigenvalues.size


def error_curves(x) -> list[ErrorCurve]:
    x = as_tensor(x)
    v = x.values
    total = float(np.dot(v, v))
    curves = []
    for n in range(x.ndim):
        w = eig_leading(gram(x, n), 0).eigenvalues
        tails = tail_sums(w, noise_floor(w))
        if total > 0:
            # round-off can leave the R = 0 tail a hair above ||X||^2
            norm_tail = np.sqrt(np.minimum(tails / total, 1.0))
        else:
            norm_tail = np.zeros_like(tails)
        curves.append(ErrorCurve(n, w, norm_tail))
    return curves


def error_metrics(x, approx) -> tuple[float, float]:
    """``(||X - X~|| / ||X||, max |X - X~|)``."""
    x = as_tensor(x)
    approx = as_tensor(approx)
    if x.dims != approx.dims:
        raise ValueError(f"dims {x.dims} and {approx.dims} differ")
    diff = (x.data - approx.data).reshape(-1, order="F")
    ref = x.values
    denom = float(np.sqrt(np.dot(ref, ref)))
    err = float(np.sqrt(np.dot(diff, diff)))
    rms = err / denom if denom > 0 else (0.0 if err == 0 else float("inf"))
    return rms, float(np.max(np.abs(diff)))


def curves_to_csv(curves: Sequence[ErrorCurve], out=None) -> str:
    """Write ``mode,R,normalized_tail`` rows; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "R", "normalized_tail"])
    for c in curves:
        for r, t in enumerate(c.normalized_tail):
            w.writerow([c.mode, r, repr(float(t))])
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text
