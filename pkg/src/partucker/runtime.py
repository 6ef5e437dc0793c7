"""In-process message-passing harness for SPMD programs on a Cartesian grid.

Every logical rank runs the same program in its own thread and owns its local
data; ranks exchange data only through :class:`RankContext` point-to-point
messages and the collectives built on them.  Two execution modes give
identical results and ledgers:

``serial``
    one rank runs at a time; control passes round-robin whenever the running
    rank blocks on a receive.  Fully deterministic, and a program that can
    never make progress raises :class:`DeadlockError` immediately.
``concurrent``
    all ranks run freely; a receive that waits longer than ``timeout``
    seconds raises :class:`DeadlockError`.

Sends are buffered and never block.  Reductions always add contributions in
ascending member order, so results do not depend on scheduling.
"""

from __future__ import annotations

import os
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MODES = ("serial", "concurrent")
ENV_MODE = "PARTUCKER_HARNESS_MODE"

KINDS = ("send", "reduce", "all_reduce", "all_gather")


class HarnessError(RuntimeError):
    pass


class DeadlockError(HarnessError):
    pass


class _Aborted(BaseException):
    # Raised inside rank threads when another rank failed.
    pass


def default_mode() -> str:
    mode = os.environ.get(ENV_MODE, "serial")
    if mode not in MODES:
        raise ValueError(f"{ENV_MODE} must be one of {MODES}, got {mode!r}")
    return mode


class ProcessGrid:
    """Logical ``P_0 x ... x P_{N-1}`` grid; rank ids are column-major in the coordinates."""

    def __init__(self, pdims: Sequence[int]):
        pdims = tuple(int(p) for p in pdims)
        if not pdims or any(p < 1 for p in pdims):
            raise ValueError(f"grid dimensions must be >= 1, got {pdims}")
        self.pdims = pdims
        self.size = int(np.prod(pdims))

    @property
    def ndim(self) -> int:
        return len(self.pdims)

    def coords(self, rank: int) -> tuple[int, ...]:
        if not 0 <= rank < self.size:
            raise IndexError(f"rank {rank} out of range for {self.size} ranks")
        out = []
        for p in self.pdims:
            out.append(rank % p)
            rank //= p
        return tuple(out)

    def rank(self, coords: Sequence[int]) -> int:
        if len(coords) != self.ndim:
            raise IndexError(f"coordinates {tuple(coords)} do not match grid {self.pdims}")
        r = 0
        for c, p in zip(reversed(coords), reversed(self.pdims)):
            if not 0 <= c < p:
                raise IndexError(f"coordinates {tuple(coords)} out of range for grid {self.pdims}")
            r = r * p + c
        return r

    def others(self, n: int) -> int:
        """Number of ranks in all modes but ``n``."""
        return self.size // self.pdims[n]

    def column(self, rank: int, n: int) -> "Group":
        """Ranks that differ from ``rank`` only in coordinate ``n``, ordered by it."""
        c = list(self.coords(rank))
        members = []
        for p in range(self.pdims[n]):
            c[n] = p
            members.append(self.rank(c))
        return Group(tuple(members))

    def row(self, rank: int, n: int) -> "Group":
        """Ranks sharing coordinate ``n`` with ``rank``, in ascending rank order."""
        pn = self.coords(rank)[n]
        return Group(tuple(r for r in range(self.size) if self.coords(r)[n] == pn))

    def __eq__(self, other):
        return isinstance(other, ProcessGrid) and self.pdims == other.pdims

    def __hash__(self):
        return hash(self.pdims)

    def __repr__(self):
        return f"ProcessGrid({'x'.join(map(str, self.pdims))})"


def grid_create(pdims: Sequence[int]) -> ProcessGrid:
    return ProcessGrid(pdims)


@dataclass(frozen=True)
class Group:
    """Ordered set of ranks taking part in a collective."""

    members: tuple

    @property
    def size(self) -> int:
        return len(self.members)

    def index(self, rank: int) -> int:
        return self.members.index(rank)


@dataclass
class RankCounters:
    messages_sent: int = 0
    words_sent: int = 0
    messages_received: int = 0
    words_received: int = 0
    by_kind: dict = field(default_factory=lambda: {k: {"messages": 0, "words": 0} for k in KINDS})
    received_by_kind: dict = field(default_factory=lambda: {k: {"messages": 0, "words": 0} for k in KINDS})


class CommLedger:
    """Per-rank message and word counters, charged by the sender.

    A word is one 64-bit float.
    """

    def __init__(self, nranks: int):
        self.nranks = nranks
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with self._lock:
            self.ranks = [RankCounters() for _ in range(self.nranks)]

    def charge(self, src: int, dst: int, words: int, kind: str):
        with self._lock:
            s = self.ranks[src]
            s.messages_sent += 1
            s.words_sent += words
            s.by_kind[kind]["messages"] += 1
            s.by_kind[kind]["words"] += words
            d = self.ranks[dst]
            d.messages_received += 1
            d.words_received += words
            d.received_by_kind[kind]["messages"] += 1
            d.received_by_kind[kind]["words"] += words

    def totals(self) -> dict:
        with self._lock:
            out = {
                "messages": sum(r.messages_sent for r in self.ranks),
                "words": sum(r.words_sent for r in self.ranks),
                "words_received": sum(r.words_received for r in self.ranks),
            }
            for k in KINDS:
                out[k] = {
                    "messages": sum(r.by_kind[k]["messages"] for r in self.ranks),
                    "words": sum(r.by_kind[k]["words"] for r in self.ranks),
                }
            return out

    def snapshot(self) -> list:
        """Deep copy of the per-rank counters as plain dicts."""
        with self._lock:
            return [
                {
                    "messages_sent": r.messages_sent,
                    "words_sent": r.words_sent,
                    "messages_received": r.messages_received,
                    "words_received": r.words_received,
                    "by_kind": {k: dict(v) for k, v in r.by_kind.items()},
                    "received_by_kind": {k: dict(v) for k, v in r.received_by_kind.items()},
                }
                for r in self.ranks
            ]

    def report(self) -> str:
        """Text table of messages/words per collective kind per rank."""
        lines = ["rank," + ",".join(f"{k}_messages,{k}_words" for k in KINDS)]
        for i, r in enumerate(self.snapshot()):
            cells = [str(i)]
            for k in KINDS:
                cells += [str(r["by_kind"][k]["messages"]), str(r["by_kind"][k]["words"])]
            lines.append(",".join(cells))
        return "\n".join(lines)


def ledger_snapshot(harness: "Harness") -> dict:
    return harness.ledger.totals()


class MemoryTracker:
    """Accounts named buffers held by one rank, in words, and records the peak."""

    def __init__(self):
        self.live: dict[str, int] = {}
        self.current = 0
        self.peak = 0

    def hold(self, name: str, words: int):
        if name in self.live:
            raise KeyError(f"buffer {name!r} is already held")
        self.live[name] = int(words)
        self.current += int(words)
        self.peak = max(self.peak, self.current)

    def release(self, name: str):
        self.current -= self.live.pop(name)

    def rename(self, old: str, new: str):
        self.live[new] = self.live.pop(old)


class _Mailbox:
    def __init__(self):
        self.cond = threading.Condition()
        self.queues: dict = defaultdict(deque)

    def put(self, src, dst, tag, payload):
        with self.cond:
            self.queues[(src, dst)].append((tag, payload))
            self.cond.notify_all()

    def find(self, src, dst, tag):
        q = self.queues.get((src, dst))
        if q:
            for i, (t, _) in enumerate(q):
                if t == tag:
                    return i
        return None

    def take(self, src, dst, i):
        q = self.queues[(src, dst)]
        _, payload = q[i]
        del q[i]
        return payload


class _SerialScheduler:
    """Runs one rank at a time, switching round-robin at blocking receives."""

    def __init__(self, nranks: int, mailbox: _Mailbox):
        self.n = nranks
        self.mailbox = mailbox
        self.cond = mailbox.cond
        self.current = 0
        self.done = [False] * nranks
        self.waiting: list = [None] * nranks
        self.failed = False
        self.deadlock: DeadlockError | None = None

    def _runnable(self, r):
        if self.done[r]:
            return False
        w = self.waiting[r]
        return w is None or self.mailbox.find(*w) is not None

    def _switch_from(self, rank):
        for step in range(1, self.n + 1):
            r = (rank + step) % self.n
            if self._runnable(r):
                self.current = r
                self.cond.notify_all()
                return
        if not all(self.done):
            self.failed = True
            self.deadlock = DeadlockError(f"no rank can progress; waiting on {self._describe()}")
            self.cond.notify_all()
            raise self.deadlock
        self.cond.notify_all()

    def _describe(self):
        return ", ".join(f"rank {r} <- rank {w[0]} tag {w[2]!r}"
                         for r, w in enumerate(self.waiting) if w is not None and not self.done[r])

    def _wait_turn(self, rank):
        self.cond.wait_for(lambda: self.current == rank or self.failed)
        if self.failed:
            raise _Aborted()

    def start(self, rank):
        with self.cond:
            self._wait_turn(rank)

    def wait_message(self, rank, key):
        with self.cond:
            if self.mailbox.find(*key) is not None:
                return
            self.waiting[rank] = key
            self._switch_from(rank)
            self._wait_turn(rank)
            self.waiting[rank] = None

    def finish(self, rank, failed=False):
        with self.cond:
            self.done[rank] = True
            if failed:
                self.failed = True
                self.cond.notify_all()
                return
            if not self.failed:
                try:
                    self._switch_from(rank)
                except DeadlockError:
                    pass


class RankContext:
    """Handle through which a rank's program communicates."""

    def __init__(self, harness: "Harness", rank: int):
        self.harness = harness
        self.grid = harness.grid
        self.rank = rank
        self.coords = harness.grid.coords(rank)
        self.memory = MemoryTracker()
        self._seq: dict = defaultdict(int)

    # point-to-point -------------------------------------------------------
    def send(self, dest: int, payload, tag=0, kind: str = "send"):
        if dest == self.rank:
            raise HarnessError(f"rank {self.rank} cannot send to itself")
        if not 0 <= dest < self.grid.size:
            raise HarnessError(f"destination rank {dest} does not exist")
        buf = np.array(payload, dtype=np.float64, copy=True)
        self.harness.ledger.charge(self.rank, dest, buf.size, kind)
        self.harness._mailbox.put(self.rank, dest, tag, buf)

    def recv(self, src: int, tag=0) -> np.ndarray:
        if src == self.rank:
            raise HarnessError(f"rank {self.rank} cannot receive from itself")
        return self.harness._recv(self.rank, src, tag)

    # collectives ----------------------------------------------------------
    def _tag(self, group: Group, name: str):
        key = (group.members, name)
        self._seq[key] += 1
        return ("coll", name, group.members, self._seq[key])

    def reduce(self, group: Group, local, root: int):
        """Sum of members' buffers delivered to member index ``root`` (None elsewhere)."""
        return self._reduce(group, local, root, "reduce", self._tag(group, "reduce"))

    def _reduce(self, group, local, root, kind, tag):
        me = group.index(self.rank)
        local = np.asarray(local, dtype=np.float64)
        if group.size == 1:
            return local.copy()
        root_rank = group.members[root]
        if me != root:
            self.send(root_rank, local, tag, kind)
            return None
        acc = None
        for i, r in enumerate(group.members):
            part = local if i == me else self.recv(r, tag)
            if part.shape != local.shape:
                raise HarnessError(
                    f"reduce buffer shape {part.shape} from rank {r} != {local.shape}")
            acc = part.copy() if acc is None else acc + part
        return acc

    def all_reduce(self, group: Group, local) -> np.ndarray:
        """Sum of members' buffers, replicated on every member."""
        tag = self._tag(group, "all_reduce")
        local = np.asarray(local, dtype=np.float64)
        if group.size == 1:
            return local.copy()
        total = self._reduce(group, local, 0, "all_reduce", tag + ("up",))
        root = group.members[0]
        if self.rank == root:
            for r in group.members[1:]:
                self.send(r, total, tag + ("down",), "all_reduce")
            return total
        return self.recv(root, tag + ("down",)).reshape(local.shape)

    def all_gather(self, group: Group, local, axis: int = 0) -> np.ndarray:
        """Members' buffers concatenated along ``axis`` in member order, on every member."""
        tag = self._tag(group, "all_gather")
        local = np.asarray(local, dtype=np.float64)
        if group.size == 1:
            return local.copy()
        for r in group.members:
            if r != self.rank:
                self.send(r, local, tag, "all_gather")
        parts = []
        for r in group.members:
            if r == self.rank:
                parts.append(local)
            else:
                parts.append(self.recv(r, tag))
        return np.concatenate(parts, axis=axis)


class Harness:
    """Runs an SPMD program once per rank of ``grid``.

    The ledger accumulates over runs until :meth:`CommLedger.reset`.
    """

    def __init__(self, grid, mode: str | None = None, timeout: float = 60.0):
        self.grid = grid if isinstance(grid, ProcessGrid) else ProcessGrid(grid)
        self.mode = default_mode() if mode is None else mode
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.timeout = timeout
        self.ledger = CommLedger(self.grid.size)
        self.peak_memory: list[int] = [0] * self.grid.size
        self._mailbox = _Mailbox()
        self._sched = None

    def _recv(self, rank, src, tag):
        key = (src, rank, tag)
        mb = self._mailbox
        if self._sched is not None:
            self._sched.wait_message(rank, key)
            with mb.cond:
                return mb.take(src, rank, mb.find(*key))
        with mb.cond:
            ok = mb.cond.wait_for(lambda: mb.find(*key) is not None or self._abort,
                                  timeout=self.timeout)
            if self._abort:
                raise _Aborted()
            if not ok:
                raise DeadlockError(f"rank {rank} timed out waiting on rank {src} tag {tag!r}")
            return mb.take(src, rank, mb.find(*key))

    def run(self, program: Callable[[RankContext], object]) -> list:
        """Execute ``program(ctx)`` on every rank; return results by rank.

        The first failing rank's exception (lowest rank id) is re-raised.
        """
        n = self.grid.size
        self._mailbox = _Mailbox()
        self._abort = False
        self._sched = _SerialScheduler(n, self._mailbox) if self.mode == "serial" else None
        contexts = [RankContext(self, r) for r in range(n)]
        results = [None] * n
        errors: list = [None] * n

        def body(r):
            ctx = contexts[r]
            failed = False
            try:
                if self._sched is not None:
                    self._sched.start(r)
                results[r] = program(ctx)
            except _Aborted:
                failed = True
            except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
                errors[r] = exc
                failed = True
                with self._mailbox.cond:
                    self._abort = True
                    self._mailbox.cond.notify_all()
            finally:
                if self._sched is not None:
                    self._sched.finish(r, failed)

        threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        sched, self._sched = self._sched, None
        for r, c in enumerate(contexts):
            self.peak_memory[r] = max(self.peak_memory[r], c.memory.peak)
        for exc in errors:
            if exc is not None:
                raise exc
        if sched is not None and sched.deadlock is not None:
            raise sched.deadlock
        leftover = sum(len(q) for q in self._mailbox.queues.values())
        if leftover:
            raise HarnessError(f"{leftover} message(s) were sent but never received")
        return results
