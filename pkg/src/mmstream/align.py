"""Realignment of delayed samples into cross-source epochs.

Three policies, all keyed on a sample's *adjusted* time (arrival minus the
stream's propagation delay estimate):

* ``IntraAligner`` groups samples of synchronized sensors that share a sampling
  window, emitting an epoch once every source reported or once the first member
  has waited ``stale_ns``.
* ``PullBuffers`` + ``pull_pairs`` draw, at a requested instant, the nearest
  unconsumed sample of every source.
* ``PushAligner`` emits on every arrival with the last known sample of the others.
"""

from __future__ import annotations

import bisect
from collections.abc import Mapping
from dataclasses import dataclass, field

from .errors import UnknownSource
from .wire import Sample, match_topic

LATE_DISCARD = "discard"
LATE_JOIN_NEXT = "join-next"


@dataclass
class AlignConfig:
    sources: list[str]
    stale_ns: int
    nominal_period_ns: int | dict[str, int]
    per_stream_offset: dict[str, int] = field(default_factory=dict)
    pairing_window_ns: int | dict[str, int] | None = None
    late_policy: str = LATE_DISCARD

    def __post_init__(self) -> None:
        self.sources = list(self.sources)
        if not self.sources or len(set(self.sources)) != len(self.sources):
            raise ValueError("sources must be non-empty and unique")
        if self.stale_ns <= 0:
            raise ValueError("stale_ns must be > 0")
        if self.late_policy not in (LATE_DISCARD, LATE_JOIN_NEXT):
            raise ValueError(f"unknown late policy {self.late_policy!r}")
        for s in self.sources:
            if self.period(s) <= 0:
                raise ValueError(f"nominal period of {s} must be > 0")

    def index(self, source: str) -> int:
        try:
            return self.sources.index(source)
        except ValueError:
            raise UnknownSource(source) from None

    def period(self, source: str) -> int:
        p = self.nominal_period_ns
        return int(p[source]) if isinstance(p, Mapping) else int(p)

    @property
    def epoch_period_ns(self) -> int:
        return max(self.period(s) for s in self.sources)

    def window(self, source: str) -> int:
        w = self.pairing_window_ns
        if w is None:
            return self.period(source) // 2
        return int(w[source]) if isinstance(w, Mapping) else int(w)

    def adjusted_time(self, source: str, sample: Sample) -> int:
        """Arrival minus the stream's delay estimate.

        A configured per-stream offset wins; otherwise a producer-supplied
        generation time is used; otherwise the raw arrival time.
        """
        off = self.per_stream_offset.get(source)
        if off is not None:
            return sample.time_of_arrival_ns - off
        if sample.time_of_generation_ns:
            return sample.time_of_generation_ns
        return sample.time_of_arrival_ns

    def source_of(self, topic: str) -> str | None:
        if topic in self.sources:
            return topic
        for s in self.sources:
            if match_topic(s, topic):
                return s
        return None


@dataclass(frozen=True)
class AlignedEpoch:
    epoch_time_ns: int
    sources: tuple[str, ...]
    slots: tuple[Sample | None, ...]

    @property
    def missing_mask(self) -> int:
        """Bit i set when ``sources[i]`` is missing."""
        return sum(1 << i for i, s in enumerate(self.slots) if s is None)

    @property
    def complete(self) -> bool:
        return all(s is not None for s in self.slots)

    @property
    def completeness(self) -> str:
        return "complete" if self.complete else "partial"

    @property
    def present(self) -> int:
        return sum(s is not None for s in self.slots)

    def __getitem__(self, source: str) -> Sample | None:
        return self.slots[self.sources.index(source)]


class _Bucket:
    __slots__ = ("first_arrival", "slots")

    def __init__(self, first_arrival: int, n: int) -> None:
        self.first_arrival = first_arrival
        self.slots: list[Sample | None] = [None] * n

    def complete(self) -> bool:
        return all(s is not None for s in self.slots)


class IntraAligner:
    """Stale-parameter epoch assembly for sensors sharing a sampling window."""

    def __init__(self, config: AlignConfig) -> None:
        self.config = config
        self._pending: dict[int, _Bucket] = {}
        self._emitted_upto: int | None = None
        self.late_discarded = 0
        self.late_joined = 0
        self.duplicates = 0
        self.emitted = 0

    def epoch_key(self, source: str, sample: Sample) -> int:
        period = self.config.epoch_period_ns
        return (self.config.adjusted_time(source, sample) + period // 2) // period

    def insert(self, source: str, sample: Sample, arrival_ns: int | None = None) -> None:
        idx = self.config.index(source)
        arrival = sample.time_of_arrival_ns if arrival_ns is None else arrival_ns
        key = self.epoch_key(source, sample)
        if self._emitted_upto is not None and key <= self._emitted_upto:
            if self.config.late_policy != LATE_JOIN_NEXT:
                self.late_discarded += 1
                return
            key = self._emitted_upto + 1
            bucket = self._pending.get(key)
            if bucket is not None and bucket.slots[idx] is not None:
                self.late_discarded += 1
                return
            self.late_joined += 1
        bucket = self._pending.get(key)
        if bucket is None:
            bucket = self._pending[key] = _Bucket(arrival, len(self.config.sources))
        if bucket.slots[idx] is not None:
            self.duplicates += 1
            return
        bucket.slots[idx] = sample

    def poll(self, now_ns: int) -> list[AlignedEpoch]:
        if not self._pending:
            return []
        keys = sorted(self._pending)
        stale = self.config.stale_ns
        forced = None
        for k in keys:
            if now_ns - self._pending[k].first_arrival >= stale:
                forced = k
        out = []
        for k in keys:
            bucket = self._pending[k]
            if (forced is None or k > forced) and not bucket.complete():
                break
            del self._pending[k]
            out.append(
                AlignedEpoch(k * self.config.epoch_period_ns, tuple(self.config.sources), tuple(bucket.slots))
            )
            self._emitted_upto = k
        self.emitted += len(out)
        return out

    def __len__(self) -> int:
        return len(self._pending)


def intra_insert(buf: IntraAligner, source_id: str, sample: Sample) -> None:
    buf.insert(source_id, sample)


def intra_poll(buf: IntraAligner, now_ns: int) -> list[AlignedEpoch]:
    return buf.poll(now_ns)


class PullBuffers:
    """Per-source unconsumed samples, kept sorted by adjusted time."""

    def __init__(self, config: AlignConfig) -> None:
        self.config = config
        self._times: dict[str, list[tuple[int, int]]] = {s: [] for s in config.sources}
        self._samples: dict[str, dict[int, Sample]] = {s: {} for s in config.sources}
        self._counter = 0
        self._last_pull: int | None = None
        self.expired = 0

    def add(self, source: str, sample: Sample) -> None:
        if source not in self._times:
            raise UnknownSource(source)
        self._counter += 1
        bisect.insort(self._times[source], (self.config.adjusted_time(source, sample), self._counter))
        self._samples[source][self._counter] = sample

    def __len__(self) -> int:
        return sum(len(v) for v in self._times.values())

    def _take(self, source: str, pull_time: int) -> Sample | None:
        times = self._times[source]
        w = self.config.window(source)
        # everything older than pull_time - w can never be selected again
        cut = bisect.bisect_left(times, (pull_time - w, -1))
        if cut:
            for _, c in times[:cut]:
                del self._samples[source][c]
            del times[:cut]
            self.expired += cut
        best = None
        for i, (adj, _c) in enumerate(times):
            if adj > pull_time + w:
                break
            dist = abs(adj - pull_time)
            # strict < keeps the earlier candidate on ties (list is time-ordered)
            if best is None or dist < best[0]:
                best = (dist, i)
        if best is None:
            return None
        _, c = times.pop(best[1])
        return self._samples[source].pop(c)

    def pull(self, pull_time_ns: int) -> AlignedEpoch | None:
        if self._last_pull is not None and pull_time_ns < self._last_pull:
            raise ValueError("pull times must be non-decreasing")
        self._last_pull = pull_time_ns
        slots = tuple(self._take(s, pull_time_ns) for s in self.config.sources)
        if all(s is None for s in slots):
            return None
        return AlignedEpoch(pull_time_ns, tuple(self.config.sources), slots)


def pull_pairs(buffers: PullBuffers, pull_time_ns: int, config: AlignConfig | None = None) -> AlignedEpoch | None:
    """Nearest unconsumed sample per source within its pairing window; None if all missing."""
    if config is not None and config is not buffers.config:
        buffers.config = config
    return buffers.pull(pull_time_ns)


class PushAligner:
    """Event-driven epochs: the new arrival plus the latest cached sample of every other source."""

    def __init__(self, config: AlignConfig) -> None:
        self.config = config
        self.latest: dict[str, Sample] = {}
        self.triggers = 0

    def trigger(self, source: str, sample: Sample) -> AlignedEpoch:
        return push_trigger(source, sample, self.latest, self.config, _owner=self)


def push_trigger(source: str, sample: Sample, latest: dict, config: AlignConfig, _owner=None) -> AlignedEpoch:
    config.index(source)
    latest[source] = sample
    slots = tuple(latest.get(s) for s in config.sources)
    if _owner is not None:
        _owner.triggers += 1
    return AlignedEpoch(config.adjusted_time(source, sample), tuple(config.sources), slots)
