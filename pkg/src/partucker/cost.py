"""Analytic alpha-beta-gamma cost model for parallel ST-HOSVD and HOOI.

Every term is ``coefficient * count`` where ``count`` is the number of
messages, words or flops.  Counts are formed exactly (as fractions) and
rounded once, except for the ``log2`` factors in latency counts, so the
report does not depend on how the sums are grouped.  Totals use
``math.fsum``.

Each term is the closed form for its kernel.  For ST-HOSVD each step uses the
working-tensor size ``J`` at that point of the mode order.  For HOOI the
TTM products take ``R_k`` for modes up to the current one in the mode order
and ``I_k`` for the rest, while the Gram term uses ``prod_{k != n} R_k``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

PHASES = ("ttm", "gram", "eig")
ALGORITHMS = ("sthosvd", "hooi")


@dataclass(frozen=True)
class CostParams:
    """Machine and problem parameters.

    ``alpha`` is seconds per message, ``beta`` seconds per word and ``gamma``
    seconds per flop.  ``mode_order`` defaults to the natural order.
    """

    alpha: float
    beta: float
    gamma: float
    grid: tuple
    dims: tuple
    ranks: tuple
    mode_order: tuple | None = None

    def __post_init__(self):
        for name in ("grid", "dims", "ranks"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        n = len(self.dims)
        if n == 0 or len(self.grid) != n or len(self.ranks) != n:
            raise ValueError(f"grid {self.grid}, dims {self.dims} and ranks {self.ranks} must have equal length")
        if any(p < 1 for p in self.grid):
            raise ValueError(f"grid {self.grid} must be positive")
        if any(not 1 <= r <= d for d, r in zip(self.dims, self.ranks)):
            raise ValueError(f"ranks {self.ranks} must lie in 1..dims {self.dims}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta and gamma must be non-negative")
        order = tuple(range(n)) if self.mode_order is None else tuple(int(m) for m in self.mode_order)
        if sorted(order) != list(range(n)):
            raise ValueError(f"mode order {order} is not a permutation of 0..{n - 1}")
        object.__setattr__(self, "mode_order", order)

    @property
    def nprocs(self) -> int:
        return math.prod(self.grid)


@dataclass(frozen=True)
class PhaseCost:
    phase: str
    mode: int
    alpha_term: float
    beta_term: float
    gamma_term: float

    @property
    def total(self) -> float:
        return math.fsum((self.alpha_term, self.beta_term, self.gamma_term))


@dataclass
class CostReport:
    algorithm: str
    terms: list = field(default_factory=list)
    memory_words: float = 0.0

    def _sum(self, attr, phase=None) -> float:
        return math.fsum(getattr(t, attr) for t in self.terms if phase in (None, t.phase))

    def latency(self, phase=None) -> float:
        return self._sum("alpha_term", phase)

    def bandwidth(self, phase=None) -> float:
        return self._sum("beta_term", phase)

    def flops(self, phase=None) -> float:
        return self._sum("gamma_term", phase)

    @property
    def total(self) -> float:
        return math.fsum(v for t in self.terms for v in (t.alpha_term, t.beta_term, t.gamma_term))

    def to_csv(self, out=None) -> str:
        """``phase,mode,alpha_term,beta_term,gamma_term`` rows plus a total row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "mode", "alpha_term", "beta_term", "gamma_term"])
        for t in self.terms:
            w.writerow([t.phase, t.mode, f"{t.alpha_term:.6g}", f"{t.beta_term:.6g}", f"{t.gamma_term:.6g}"])
        w.writerow(["total", "", f"{self.latency():.6g}", f"{self.bandwidth():.6g}", f"{self.flops():.6g}"])
        text = buf.getvalue()
        if out is not None:
            out.write(text)
        return text


def _count(rational: Fraction, log_coeff: Fraction = Fraction(0), p: int = 1) -> float:
    c = float(rational)
    if log_coeff and p > 1:
        c += float(log_coeff) * math.log2(p)
    return c


def memory_words(dims: Sequence[int], ranks: Sequence[int], grid: Sequence[int]) -> Fraction:
    """Per-processor storage bound ``2I/P + sum R_n I_n/P_n + max I_n^2 + max R_n I_n``."""
    p = math.prod(grid)
    return (Fraction(2 * math.prod(dims), p)
            + sum(Fraction(r * d, q) for d, r, q in zip(dims, ranks, grid))
            + max(d * d for d in dims)
            + max(r * d for d, r in zip(dims, ranks)))


def _sthosvd_terms(c: CostParams) -> list:
    big_p = c.nprocs
    cur = list(c.dims)
    out = []
    for n in c.mode_order:
        i_n, r_n, p_n = c.dims[n], c.ranks[n], c.grid[n]
        p_hat = big_p // p_n
        j = math.prod(cur)
        j_hat = j // i_n
        out.append(PhaseCost(
            "gram", n,
            c.alpha * _count(Fraction(2 * (p_n - 1)), Fraction(2), p_hat),
            c.beta * _count(Fraction(2 * (p_n - 1) * j + 2 * (p_hat - 1) * i_n * i_n, big_p)),
            c.gamma * _count(Fraction(2 * i_n * j, big_p)),
        ))
        out.append(PhaseCost(
            "eig", n,
            c.alpha * _count(Fraction(0), Fraction(1), p_n),
            c.beta * _count(Fraction((p_n - 1) * i_n * i_n, p_n)),
            c.gamma * _count(Fraction(10 * i_n ** 3, 3)),
        ))
        out.append(PhaseCost(
            "ttm", n,
            c.alpha * _count(Fraction(0), Fraction(p_n), p_n),
            c.beta * _count(Fraction((p_n - 1) * j_hat * r_n, big_p)),
            c.gamma * _count(Fraction(2 * j * r_n, big_p)),
        ))
        cur[n] = r_n
    return out


def _hooi_terms(c: CostParams) -> list:
    big_p = c.nprocs
    nmodes = len(c.dims)
    out = []
    for pos, n in enumerate(c.mode_order):
        i_n, p_n = c.dims[n], c.grid[n]
        p_hat = big_p // p_n
        done = c.mode_order[:pos + 1]
        # prod_{k<=n} R_k prod_{k>n} I_k along the mode order
        chain = math.prod(c.ranks[k] if k in done else c.dims[k] for k in range(nmodes))
        r_hat = math.prod(c.ranks[k] for k in range(nmodes) if k != n)
        out.append(PhaseCost(
            "ttm", n,
            c.alpha * _count(Fraction(0), Fraction(nmodes * p_n), p_n),
            c.beta * _count(Fraction((nmodes - 1) * (p_n - 1) * chain, big_p)),
            c.gamma * _count(Fraction((nmodes - 1) * 2 * i_n * chain, big_p)),
        ))
        out.append(PhaseCost(
            "gram", n,
            c.alpha * _count(Fraction(2 * (p_n - 1)), Fraction(2), p_hat),
            c.beta * _count(Fraction(2 * (p_n - 1) * i_n * r_hat + 2 * i_n * i_n * (p_hat - 1), big_p)),
            c.gamma * _count(Fraction(2 * i_n * i_n * r_hat, big_p)),
        ))
        out.append(PhaseCost(
            "eig", n,
            c.alpha * _count(Fraction(0), Fraction(1), p_n),
            c.beta * _count(Fraction((p_n - 1) * i_n, p_n)),
            c.gamma * _count(Fraction(10 * i_n ** 3, 3)),
        ))
    return out


def estimate_cost(params: CostParams, algorithm: str = "sthosvd") -> CostReport:
    """Predicted time split by phase and mode.

    ``algorithm`` is ``"sthosvd"`` for the full initialization or ``"hooi"``
    for one outer HOOI iteration.
    """
    if algorithm == "hooi-iteration":
        algorithm = "hooi"
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    terms = _sthosvd_terms(params) if algorithm == "sthosvd" else _hooi_terms(params)
    mem = float(memory_words(params.dims, params.ranks, params.grid))
    return CostReport(algorithm, terms, mem)
