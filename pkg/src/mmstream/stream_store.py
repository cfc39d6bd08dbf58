"""Streaming datastructures: the linked conveyor-belt FIFO and the frame ring.

StreamFifo is written at the head by exactly one thread and read at the tail
by exactly one other thread.  The unbounded variant takes no lock: the writer
only touches the head node and the reader only touches the tail node, and the
single field they share (the ``newer`` link of the newest node) is published
by one attribute store.
"""

from __future__ import annotations

import enum
import threading
from typing import Any

__all__ = ["Dropped", "Overflow", "StreamFifo", "RingBuffer", "GrowableArray"]


class Overflow(enum.Enum):
    DROP_OLDEST = "drop-oldest"
    DROP_NEWEST = "drop-newest"


class Dropped(enum.Enum):
    """Returned by a bounded push that had to discard a sample."""

    OLDEST = "oldest"
    NEWEST = "newest"


class _Link:
    __slots__ = ("value", "newer", "older")

    def __init__(self, value: Any = None, older: _Link | None = None) -> None:
        self.value = value
        self.newer: _Link | None = None
        self.older = older


class StreamFifo:
    """Doubly-linked FIFO: push at the head (newest), pop at the tail (oldest).

    The tail is a sentinel link whose ``newer`` pointer is the oldest stored
    sample.  Counts are derived from two monotone counters, one owned by each
    side, so ``len()`` never needs a lock.
    """

    def __init__(self, max_len: int | None = None, overflow: Overflow | str = Overflow.DROP_OLDEST):
        if max_len is not None and max_len < 1:
            raise ValueError("max_len must be >= 1")
        self.max_len = max_len
        self.overflow = Overflow(overflow)
        sentinel = _Link()
        self._head = sentinel
        self._tail = sentinel
        self._pushed = 0
        self._popped = 0
        self._pushed_bytes = 0
        self._popped_bytes = 0
        self.dropped = 0
        # Bounded mode lets the writer evict at the tail, so both sides serialize.
        self._lock = threading.Lock() if max_len is not None else None

    def __len__(self) -> int:
        return self._pushed - self._popped

    @property
    def count(self) -> int:
        return len(self)

    @property
    def nbytes(self) -> int:
        """Payload bytes currently held (samples without ``nbytes`` count as 0)."""
        return self._pushed_bytes - self._popped_bytes

    @property
    def total_pushed(self) -> int:
        return self._pushed

    def push_head(self, sample) -> Dropped | None:
        if self._lock is None:
            self._link(sample)
            return None
        with self._lock:
            if len(self) >= self.max_len:
                self.dropped += 1
                if self.overflow is Overflow.DROP_NEWEST:
                    return Dropped.NEWEST
                self._unlink()
                self._link(sample)
                return Dropped.OLDEST
            self._link(sample)
            return None

    def _link(self, sample) -> None:
        node = _Link(sample, self._head)
        # counters first: len() may overshoot by one, never undershoot below zero
        self._pushed_bytes += getattr(sample, "nbytes", 0)
        self._pushed += 1
        self._head.newer = node  # publish point for the reader
        self._head = node

    def _unlink(self):
        oldest = self._tail.newer
        if oldest is None:
            return None
        value = oldest.value
        # ``oldest`` becomes the new sentinel; drop references behind it
        oldest.value = None
        oldest.older = None
        self._tail = oldest
        self._popped_bytes += getattr(value, "nbytes", 0)
        self._popped += 1
        return value

    def pop_tail(self):
        """Remove and return the oldest sample, or None when empty."""
        if self._lock is None:
            return self._unlink()
        with self._lock:
            return self._unlink()

    def drain_batch(self, limit: int) -> list:
        """Remove up to ``limit`` oldest samples, in order."""
        if limit < 1:
            raise ValueError("limit must be >= 1")
        out = []
        pop = self.pop_tail
        for _ in range(limit):
            value = pop()
            if value is None:
                break
            out.append(value)
        return out

    def drain_all(self) -> list:
        """Everything present when the call starts (later pushes stay queued)."""
        n = len(self)
        return self.drain_batch(n) if n > 0 else []

    def peek_tail(self):
        node = self._tail.newer
        return None if node is None else node.value


class RingBuffer:
    """Fixed-capacity frame ring with overwrite-oldest semantics.

    Frames are copied into preallocated slots, the way a capture device writes
    into a reserved buffer.  Frame ids start at 1 and increase per put.
    """

    def __init__(self, capacity: int, frame_size: int) -> None:
        if capacity < 1 or frame_size < 1:
            raise ValueError("capacity and frame_size must be positive")
        self._capacity = capacity
        self.frame_size = frame_size
        self._slots = bytearray(capacity * frame_size)
        self._generation = [0] * capacity  # frame id held by each slot, 0 = never written
        self._next_id = 1
        self._read_id = 1  # oldest frame not yet read
        self.puts = 0
        self.gets = 0
        self.evictions = 0
        self._lock = threading.Lock()

    @property
    def capacity(self) -> int:
        return self._capacity

    def __len__(self) -> int:
        return self._next_id - self._read_id

    def put(self, frame) -> int | None:
        """Store ``frame``; return the id of the unread frame it overwrote, if any."""
        if len(frame) != self.frame_size:
            raise ValueError(f"frame is {len(frame)} bytes, ring expects {self.frame_size}")
        with self._lock:
            evicted = None
            if self._next_id - self._read_id >= self._capacity:
                evicted = self._read_id
                self._read_id += 1
                self.evictions += 1
            frame_id = self._next_id
            slot = (frame_id - 1) % self._capacity
            start = slot * self.frame_size
            self._slots[start : start + self.frame_size] = frame
            self._generation[slot] = frame_id
            self._next_id += 1
            self.puts += 1
            return evicted

    def get(self) -> tuple[int, bytes] | None:
        """Oldest unread (frame_id, bytes) or None."""
        with self._lock:
            if self._read_id >= self._next_id:
                return None
            frame_id = self._read_id
            slot = (frame_id - 1) % self._capacity
            assert self._generation[slot] == frame_id
            start = slot * self.frame_size
            data = bytes(self._slots[start : start + self.frame_size])
            self._read_id += 1
            self.gets += 1
            return frame_id, data


def ring_put(ring: RingBuffer, frame) -> int | None:
    return ring.put(frame)


def ring_get(ring: RingBuffer):
    return ring.get()


class GrowableArray:
    """Contiguous byte store that doubles on overflow, copying everything.

    Only used as the benchmark baseline the linked FIFO is compared against.
    """

    def __init__(self, item_size: int, initial: int = 16) -> None:
        self.item_size = item_size
        self._buf = bytearray(initial * item_size)
        self._n = 0
        self.reallocations = 0

    def append(self, payload) -> None:
        end = (self._n + 1) * self.item_size
        if end > len(self._buf):
            grown = bytearray(2 * len(self._buf))
            grown[: len(self._buf)] = self._buf
            self._buf = grown
            self.reallocations += 1
        self._buf[end - self.item_size : end] = payload
        self._n += 1

    def __len__(self) -> int:
        return self._n
