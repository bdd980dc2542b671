"""Bounded in-memory sample store between reception and training.

Three policies cover the bias-mitigation spectrum:

* Fifo — plain bounded queue; oldest sample evicted on overflow. Batches
  pop from the head, so training order mirrors arrival order (the
  "streaming" baseline that preserves every upstream bias).
* ReservoirWeighted — weighted reservoir: resident set is the top-k by
  the key u^(1/w) (u uniform per sample, w its weight), so after a long
  stream each unit-weight sample was retained with equal probability.
  Reads sample by weight without removing.
* ReadOnceRandom — insert into free slots only (full buffer rejects the
  put and the caller applies backpressure); random reads remove what
  they return, so every accepted sample is trained on exactly once; a
  watermark keeps batches from forming while the population is small.

Thread-safety: many producers may put() concurrently with one consumer
calling try_get_batch(); all public methods are linearizable.
"""

from __future__ import annotations

import heapq
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .sampler import ParamVector


@dataclass(eq=False)
class SingleStep:
    t_index: int
    field: np.ndarray

    def __post_init__(self):
        self.field = np.asarray(self.field, dtype=np.float64).reshape(-1)


@dataclass(eq=False)
class StepPair:
    """Two consecutive steps t and t+1, the autoregressive training unit."""

    t_index: int
    fields: np.ndarray  # shape (2, field_dim)

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 2 or self.fields.shape[0] != 2:
            raise ValueError(f"StepPair needs shape (2, k), got {self.fields.shape}")


@dataclass(eq=False)
class FullTrajectory:
    fields: np.ndarray  # shape (t_count, field_dim)

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 2:
            raise ValueError(f"FullTrajectory needs shape (t, k), got {self.fields.shape}")

    @property
    def t_count(self) -> int:
        return self.fields.shape[0]


@dataclass(eq=False)
class Sample:
    sim_id: int
    params: ParamVector
    unit: object  # SingleStep | StepPair | FullTrajectory


@dataclass(frozen=True)
class Fifo:
    pass


@dataclass(frozen=True)
class ReservoirWeighted:
    pass


@dataclass(frozen=True)
class ReadOnceRandom:
    watermark: int = 1


@dataclass
class Batch:
    samples: list
    assembled_at_step: int


@dataclass(frozen=True)
class Occupancy:
    count: int
    capacity: int
    free: int


class MemoryBuffer:
    """Bounded sample store with a pluggable retention policy."""

    def __init__(self, policy, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if isinstance(policy, ReadOnceRandom):
            if not 0 <= policy.watermark <= capacity:
                raise ValueError(
                    f"watermark {policy.watermark} outside [0, capacity={capacity}]"
                )
        self.policy = policy
        self.capacity = int(capacity)
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._gets = 0
        if isinstance(policy, Fifo):
            self._queue: deque = deque()
        elif isinstance(policy, ReservoirWeighted):
            self._heap: list = []  # (key, insertion_seq, sample, weight)
            self._seq = 0
        elif isinstance(policy, ReadOnceRandom):
            self._slots: list = [None] * self.capacity
            self._free: list = list(range(self.capacity - 1, -1, -1))
            self._occupied: list = []  # slot indices, order irrelevant
            self._slot_pos: dict = {}  # slot index -> position in _occupied
        else:
            raise ValueError(f"unknown policy {policy!r}")

    @property
    def backpressure_on_full(self) -> bool:
        """True when a rejected put means "wait and retry", not "dropped"."""
        return isinstance(self.policy, ReadOnceRandom)

    # -- producers ---------------------------------------------------------

    def put(self, sample: Sample, weight: float = 1.0) -> bool:
        """Offer one sample. Returns whether it was retained.

        ReadOnceRandom returns False on a full buffer without modifying
        it; the caller should wait (wait_for_space) and retry, which is
        what suspends an over-productive client via transport flow
        control.
        """
        if not weight > 0:
            raise ValueError(f"weight must be positive, got {weight}")
        with self._changed:
            accepted = self._put_locked(sample, weight)
            if accepted:
                self._changed.notify_all()
            return accepted

    def _put_locked(self, sample, weight) -> bool:
        p = self.policy
        if isinstance(p, Fifo):
            if len(self._queue) == self.capacity:
                self._queue.popleft()
            self._queue.append(sample)
            return True
        if isinstance(p, ReservoirWeighted):
            key = self._rng.random() ** (1.0 / weight)
            self._seq += 1
            item = (key, self._seq, sample, weight)
            if len(self._heap) < self.capacity:
                heapq.heappush(self._heap, item)
                return True
            if key > self._heap[0][0]:
                heapq.heapreplace(self._heap, item)
                return True
            return False
        # ReadOnceRandom
        if not self._free:
            return False
        slot = self._free.pop()
        self._slots[slot] = (sample, weight)
        self._slot_pos[slot] = len(self._occupied)
        self._occupied.append(slot)
        return True

    # -- the single consumer ------------------------------------------------

    def try_get_batch(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Optional[Batch]:
        """One batch, or None when the policy says not-ready."""
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if rng is None:
            rng = self._rng
        with self._changed:
            batch = self._get_locked(batch_size, rng)
            if batch is not None:
                self._gets += 1
                batch.assembled_at_step = self._gets
                self._changed.notify_all()
            return batch

    def _get_locked(self, batch_size, rng) -> Optional[Batch]:
        p = self.policy
        if isinstance(p, Fifo):
            if len(self._queue) < batch_size:
                return None
            return Batch([self._queue.popleft() for _ in range(batch_size)], 0)
        if isinstance(p, ReservoirWeighted):
            if len(self._heap) < batch_size:
                return None
            weights = np.array([item[3] for item in self._heap])
            idx = rng.choice(len(self._heap), size=batch_size, replace=False,
                             p=weights / weights.sum())
            return Batch([self._heap[i][2] for i in idx], 0)
        # ReadOnceRandom: batches gated by the watermark, reads remove.
        count = len(self._occupied)
        if count < max(p.watermark, batch_size):
            return None
        picks = rng.choice(count, size=batch_size, replace=False)
        samples = []
        # Remove by swap-with-last so positions stay dense.
        for pos in sorted((int(i) for i in picks), reverse=True):
            slot = self._occupied[pos]
            samples.append(self._slots[slot][0])
            self._slots[slot] = None
            last = self._occupied.pop()
            if pos < len(self._occupied):
                self._occupied[pos] = last
                self._slot_pos[last] = pos
            del self._slot_pos[slot]
            self._free.append(slot)
        return Batch(samples, 0)

    # -- introspection -------------------------------------------------------

    def occupancy(self) -> Occupancy:
        with self._lock:
            p = self.policy
            if isinstance(p, Fifo):
                count = len(self._queue)
            elif isinstance(p, ReservoirWeighted):
                count = len(self._heap)
            else:
                count = len(self._occupied)
            return Occupancy(count, self.capacity, self.capacity - count)

    def drain_remainder(self) -> list:
        """Remove and return everything still resident (shutdown path)."""
        with self._changed:
            p = self.policy
            if isinstance(p, Fifo):
                out = list(self._queue)
                self._queue.clear()
            elif isinstance(p, ReservoirWeighted):
                out = [item[2] for item in self._heap]
                self._heap.clear()
            else:
                out = [self._slots[s][0] for s in self._occupied]
                for s in self._occupied:
                    self._slots[s] = None
                self._free.extend(self._occupied)
                self._occupied.clear()
                self._slot_pos.clear()
            self._changed.notify_all()
            return out

    # -- blocking helpers for the server loops --------------------------------

    def wait_for_space(self, timeout: float) -> bool:
        """Block until a put might succeed. True if space is available."""
        with self._changed:
            if isinstance(self.policy, ReadOnceRandom):
                if self._free:
                    return True
                self._changed.wait(timeout)
                return bool(self._free)
            return True

    def wait_for_change(self, timeout: float) -> None:
        """Block until the buffer content changes (or timeout)."""
        with self._changed:
            self._changed.wait(timeout)
