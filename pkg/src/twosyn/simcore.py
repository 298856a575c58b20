"""Deterministic discrete-event core: integer-nanosecond clock, an ordered
event queue with cancellation, and named seeded random streams.

All time quantities in the simulator (delays, RTTs, completion times) are
integer nanoseconds so that runs are bit-identical across platforms.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from typing import Any, Callable

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def usec(v: float) -> int:
    return round(v * NS_PER_US)


def msec(v: float) -> int:
    return round(v * NS_PER_MS)


def sec(v: float) -> int:
    return round(v * NS_PER_S)


def to_sec(t_ns: int) -> float:
    return t_ns / NS_PER_S


class SchedulingError(Exception):
    """Raised when an event is scheduled before the current clock."""


class Scheduler:
    """Single-run event loop.

    Events fire in (fire_at, insertion seq) order, so same-tick events are
    delivered in the order they were scheduled regardless of container
    iteration order. Counters track every event so a run can assert that
    scheduled == fired + cancelled + still pending.
    """

    def __init__(self) -> None:
        self.now: int = 0
        self._heap: list[tuple[int, int, Callable[[Any], None], Any]] = []
        self._seq = 0
        self._pending: set[int] = set()
        self._cancelled: set[int] = set()
        self._stopped = False
        self.scheduled_count = 0
        self.fired_count = 0
        self.cancelled_count = 0

    def schedule(self, fire_at: int, action: Callable[[Any], None], arg: Any = None) -> int:
        """Enqueue `action(arg)` at time `fire_at`; returns a cancellation handle."""
        if fire_at < self.now:
            raise SchedulingError(
                f"cannot schedule at {fire_at} ns: clock is already at {self.now} ns"
            )
        seq = self._seq
        self._seq = seq + 1
        heapq.heappush(self._heap, (fire_at, seq, action, arg))
        self._pending.add(seq)
        self.scheduled_count += 1
        return seq

    def cancel(self, handle: int) -> bool:
        """True iff the event existed and had not fired; cancelled events never run."""
        if handle in self._pending:
            self._pending.discard(handle)
            self._cancelled.add(handle)
            self.cancelled_count += 1
            return True
        return False

    def stop(self) -> None:
        """Make run_until return after the current event completes."""
        self._stopped = True

    def pending_count(self) -> int:
        return len(self._pending)

    def run_until(self, deadline: int) -> int:
        """Pop and execute events in (fire_at, seq) order.

        Stops when the queue is empty, the next event lies past `deadline`,
        or stop() was called. Returns the final clock value.
        """
        heap = self._heap
        pending = self._pending
        cancelled = self._cancelled
        while heap and not self._stopped:
            fire_at, seq, action, arg = heap[0]
            if seq in cancelled:
                heapq.heappop(heap)
                cancelled.discard(seq)
                continue
            if fire_at > deadline:
                break
            heapq.heappop(heap)
            pending.discard(seq)
            self.now = fire_at
            self.fired_count += 1
            action(arg)
        return self.now


def _digest_int(*parts: object) -> int:
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_subseed(seed: int, *parts: object) -> int:
    """Stable sub-seed for a labelled consumer; independent of hash randomization."""
    return (seed ^ _digest_int(*parts)) & 0x7FFF_FFFF_FFFF_FFFF


class RngStreams:
    """One independent random.Random per named consumer.

    Identical (seed, stream name) pairs yield identical draw sequences on any
    platform; adding a new consumer never perturbs existing streams.
    """

    def __init__(self, seed: int) -> None:
        self.seed = seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, name: str) -> random.Random:
        rng = self._streams.get(name)
        if rng is None:
            rng = random.Random(derive_subseed(self.seed, "stream", name))
            self._streams[name] = rng
        return rng
