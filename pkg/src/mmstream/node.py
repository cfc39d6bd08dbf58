"""Producer / Consumer / Pipeline nodes and coordinator-driven shutdown.

A node owns one thread.  ``step()`` performs exactly one iteration of the
node's loop and ``run(stop)`` repeats it until ``stop`` is set, so every loop
can also be driven deterministically from tests.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .align import AlignConfig, AlignedEpoch, IntraAligner, PullBuffers, PushAligner
from .broker import CTL_REPORT, CTL_SHUTDOWN, BrokerClient
from .errors import AdapterFailure, BrokerUnreachable, NodeSpecError
from .stream_store import StreamFifo
from .timesync import SensorDelayEstimate, estimate_sensor_delay
from .wire import DType, Sample, control_sample, validate_topic

log = logging.getLogger(__name__)

PRODUCER, CONSUMER, PIPELINE = "producer", "consumer", "pipeline"
STATS_PREFIX = "__stats"


@dataclass
class NodeSpec:
    name: str
    kind: str
    host: str
    publishes: list[str] = field(default_factory=list)
    subscribes: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in (PRODUCER, CONSUMER, PIPELINE):
            raise NodeSpecError(f"{self.name}: unknown kind {self.kind!r}")
        for t in self.publishes:
            validate_topic(t)
        np_, ns_ = len(self.publishes), len(self.subscribes)
        ok = {
            PRODUCER: np_ >= 1 and ns_ == 0,
            CONSUMER: np_ == 0 and ns_ >= 1,
            PIPELINE: np_ >= 1 and ns_ >= 1,
        }[self.kind]
        if not ok:
            raise NodeSpecError(
                f"{self.name}: a {self.kind} cannot publish {np_} and subscribe {ns_} topics"
            )


class Reading(NamedTuple):
    """One raw measurement handed over by a device adapter."""

    topic: str | None
    data: np.ndarray | bytes


class DeviceAdapter:
    """Non-blocking source of measurements.

    ``poll()`` returns whatever arrived since the previous call (possibly
    nothing).  Adapters that can time a roundtrip to their sensor implement
    ``measure_roundtrip()`` returning nanoseconds.
    """

    def start(self) -> None:
        pass

    def poll(self) -> list[Reading]:
        raise NotImplementedError

    def measure_roundtrip(self) -> int | None:
        return None

    def close(self) -> None:
        pass


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data
    return np.frombuffer(data, dtype=np.uint8)


class Node:
    """Shared plumbing: broker client, stop handling and the 1 Hz stats topic."""

    stats_period_s = 1.0

    def __init__(self, spec: NodeSpec, broker_address, clock=None, client: BrokerClient | None = None):
        self.spec = spec
        self.clock = clock or _WallClock()
        self.client = client or BrokerClient(broker_address, name=spec.name, reconnect=True)
        self.counters: Counter = Counter()
        self.faults = 0
        self._next_stats = time.monotonic() + self.stats_period_s
        self._stats_seq = 0
        self._thread: threading.Thread | None = None
        self.error: BaseException | None = None

    def setup(self) -> None:
        if not self.client.connected:
            self.client.connect()
        for prefix in self.spec.subscribes:
            self.client.subscribe(prefix)

    def step(self) -> None:
        raise NotImplementedError

    def teardown(self) -> None:
        self.publish_stats()
        self.client.close()

    def run(self, stop: threading.Event) -> None:
        try:
            self.setup()
            while not stop.is_set():
                self.step()
                self._maybe_stats()
        except AdapterFailure as exc:
            self.error = exc
            log.error("%s stopped on adapter failure: %s", self.spec.name, exc)
            self.faults += 1
        finally:
            self.teardown()

    def start(self, stop: threading.Event) -> threading.Thread:
        self._thread = threading.Thread(target=self.run, args=(stop,), name=self.spec.name, daemon=True)
        self._thread.start()
        return self._thread

    def join(self, timeout: float | None = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    def stats(self) -> dict:
        return {"node": self.spec.name, "kind": self.spec.kind, "faults": self.faults, **self.counters}

    def _maybe_stats(self) -> None:
        if time.monotonic() >= self._next_stats:
            self._next_stats += self.stats_period_s
            self.publish_stats()

    def publish_stats(self) -> None:
        self._stats_seq += 1
        sample = control_sample(
            f"{STATS_PREFIX}/{self.spec.name}", json.dumps(self.stats()), self._stats_seq, self.clock.now_ns()
        )
        try:
            self.client.publish(sample)
        except BrokerUnreachable:
            pass


class _WallClock:
    def now_ns(self) -> int:
        return time.time_ns()


class Producer(Node):
    """Poll the adapter, stamp arrival time once per poll, store then publish each datum."""

    def __init__(
        self,
        spec: NodeSpec,
        adapter: DeviceAdapter,
        broker_address=None,
        clock=None,
        client: BrokerClient | None = None,
        fifo_max_len: int | None = None,
        idle_sleep_s: float = 0.0005,
        delay_probe_period_s: float | None = 10.0,
        delay_probe_count: int = 5,
    ) -> None:
        if spec.kind != PRODUCER:
            raise NodeSpecError(f"{spec.name} is not a producer")
        super().__init__(spec, broker_address, clock, client)
        self.adapter = adapter
        self.fifos = {t: StreamFifo(fifo_max_len) for t in spec.publishes}
        self.seq = dict.fromkeys(spec.publishes, 0)
        self.captured: Counter = Counter()
        self.idle_sleep_s = idle_sleep_s
        self.delay_probe_period_s = delay_probe_period_s
        self.delay_probe_count = delay_probe_count
        self.delay: SensorDelayEstimate | None = None
        self._next_probe = 0.0
        self._last_stamp = 0

    def setup(self) -> None:
        try:
            super().setup()
        except BrokerUnreachable:
            pass  # client redials in the background; capture starts regardless
        self.adapter.start()
        self.probe_delay()

    def probe_delay(self) -> None:
        if self.delay_probe_period_s is None:
            return
        rts = [self.adapter.measure_roundtrip() for _ in range(self.delay_probe_count)]
        rts = [r for r in rts if r is not None]
        if rts:
            self.delay = estimate_sensor_delay(rts)
        self._next_probe = time.monotonic() + self.delay_probe_period_s

    def step(self) -> int:
        try:
            readings = self.adapter.poll()
        except AdapterFailure:
            raise
        except Exception as exc:
            raise AdapterFailure(f"{self.spec.name}: {exc}") from exc
        if self.delay_probe_period_s is not None and time.monotonic() >= self._next_probe:
            self.probe_delay()
        if not readings:
            if self.idle_sleep_s:
                time.sleep(self.idle_sleep_s)
            return 0
        toa = max(self.clock.now_ns(), self._last_stamp)
        self._last_stamp = toa
        tog = 0
        if self.delay is not None and toa >= self.delay.d_hat_ns:
            tog = toa - self.delay.d_hat_ns
        default_topic = self.spec.publishes[0]
        for reading in readings:
            topic = reading.topic or default_topic
            sample = Sample.from_array(topic, self.seq[topic], toa, tog, _as_array(reading.data))
            self.seq[topic] += 1
            self.fifos[topic].push_head(sample)
            self.captured[topic] += 1
            if self.client.publish(sample):
                self.counters["published"] += 1
            else:
                self.counters["unpublished"] += 1
        self.counters["captured"] += len(readings)
        return len(readings)

    def teardown(self) -> None:
        try:
            self.adapter.close()
        finally:
            super().teardown()

    def stats(self) -> dict:
        s = super().stats()
        s["fifo"] = {t: len(f) for t, f in self.fifos.items()}
        if self.delay is not None:
            s["d_hat_ns"] = self.delay.d_hat_ns
        return s


class Consumer(Node):
    """Invoke ``handler(sample)`` once per matching message; handler errors are counted, not fatal."""

    def __init__(self, spec: NodeSpec, handler: Callable[[Sample], object], broker_address=None,
                 clock=None, client: BrokerClient | None = None, poll_timeout_s: float = 0.05):
        if spec.kind != CONSUMER:
            raise NodeSpecError(f"{spec.name} is not a consumer")
        super().__init__(spec, broker_address, clock, client)
        self.handler = handler
        self.poll_timeout_s = poll_timeout_s
        self.handled = 0
        self.handler_errors = 0

    def step(self) -> int:
        sample = self.client.recv(self.poll_timeout_s)
        if sample is None:
            return 0
        self.dispatch(sample)
        return 1

    def dispatch(self, sample: Sample) -> None:
        try:
            self.handler(sample)
            self.handled += 1
        except Exception:
            self.handler_errors += 1
            self.faults += 1
            log.exception("%s handler failed on %s seq %d", self.spec.name, sample.topic, sample.seq)
        self.counters["received"] += 1


PUSH, PULL, INTRA = "push", "pull", "intra"


class Pipeline(Node):
    """Align subscribed streams, run ``infer`` per trigger and publish its output.

    Strategies: ``push`` (one inference per arrival), ``pull`` (fixed rate,
    pairing around ``tick - stale``) and ``intra`` (one inference per epoch).  Triggers that come
    due before the loop gets to them (``infer`` still running, or the thread
    held up) are coalesced: only the most recent one runs and the others are
    counted in ``coalesced``.
    """

    def __init__(
        self,
        spec: NodeSpec,
        infer: Callable[[AlignedEpoch], object],
        align: AlignConfig,
        strategy: str = PULL,
        pull_rate_hz: float | None = None,
        broker_address=None,
        clock=None,
        client: BrokerClient | None = None,
        fifo_max_len: int | None = None,
        budget_ns: int | None = None,
        monotonic=time.monotonic_ns,
    ) -> None:
        if spec.kind != PIPELINE:
            raise NodeSpecError(f"{spec.name} is not a pipeline")
        if strategy not in (PUSH, PULL, INTRA):
            raise ValueError(f"unknown strategy {strategy!r}")
        if strategy == PULL and not pull_rate_hz:
            raise ValueError("pull strategy needs pull_rate_hz")
        super().__init__(spec, broker_address, clock, client)
        self.infer = infer
        self.align = align
        self.strategy = strategy
        self.topic = spec.publishes[0]
        self.fifo = StreamFifo(fifo_max_len)
        self.seq = 0
        self.period_ns = round(1e9 / pull_rate_hz) if pull_rate_hz else None
        self.budget_ns = budget_ns if budget_ns is not None else self.period_ns
        self._mono = monotonic
        self._next_tick: int | None = None
        self.inferences = 0
        self.coalesced = 0
        self.empty_triggers = 0
        self.over_budget = 0
        self.infer_errors = 0
        self.latencies_ns: list[int] = []
        self._push = PushAligner(align)
        self._pull = PullBuffers(align)
        self._intra = IntraAligner(align)

    def _ingest(self, sample: Sample) -> str | None:
        source = self.align.source_of(sample.topic)
        if source is None:
            self.counters["unmatched"] += 1
            return None
        self.counters["received"] += 1
        if self.strategy == PULL:
            self._pull.add(source, sample)
        elif self.strategy == INTRA:
            self._intra.insert(source, sample)
        return source

    def step(self) -> int:
        if self.strategy == PULL:
            return self._step_pull()
        if self.strategy == PUSH:
            return self._step_push()
        return self._step_intra()

    def _drain_inbox(self, timeout: float | None) -> list[Sample]:
        first = self.client.recv(timeout)
        if first is None:
            return []
        out = [first]
        while True:
            s = self.client.recv(0)
            if s is None:
                return out
            out.append(s)

    def _step_push(self) -> int:
        batch = self._drain_inbox(0.05)
        last = None
        for sample in batch:
            source = self._ingest(sample)
            if source is not None:
                self._push.latest[source] = sample
                last = (source, sample)
        if last is None:
            return 0
        # arrivals that queued up while the previous inference ran collapse into the newest
        self.coalesced += sum(1 for s in batch if self.align.source_of(s.topic)) - 1
        self._run(self._push.trigger(*last))
        return 1

    def _step_intra(self) -> int:
        for sample in self._drain_inbox(0.005):
            self._ingest(sample)
        epochs = self._intra.poll(self.clock.now_ns())
        if not epochs:
            return 0
        self.coalesced += len(epochs) - 1
        self._run(epochs[-1])
        return 1

    def _step_pull(self) -> int:
        now = self._mono()
        if self._next_tick is None:
            self._next_tick = now + self.period_ns
        wait_s = (self._next_tick - now) / 1e9
        for sample in self._drain_inbox(max(0.0, min(wait_s, 0.05))):
            self._ingest(sample)
        now = self._mono()
        if now < self._next_tick:
            return 0
        passed = (now - self._next_tick) // self.period_ns + 1
        self.coalesced += passed - 1
        due = self._next_tick + (passed - 1) * self.period_ns
        self._next_tick = due + self.period_ns
        # pair at the scheduled instant, not the (jittery) wake-up time, and look back
        # by the stale allowance so delayed sources have had time to arrive
        epoch = self._pull.pull(self.clock.now_ns() - (self._mono() - due) - self.align.stale_ns)
        if epoch is None:
            self.empty_triggers += 1
            return 0
        self._run(epoch)
        return 1

    def _run(self, epoch: AlignedEpoch) -> None:
        t0 = self._mono()
        try:
            prediction = self.infer(epoch)
        except Exception:
            self.infer_errors += 1
            self.faults += 1
            log.exception("%s inference failed", self.spec.name)
            return
        latency = self._mono() - t0
        self.latencies_ns.append(latency)
        self.inferences += 1
        if self.budget_ns is not None and latency > self.budget_ns:
            self.over_budget += 1
            log.warning("%s inference took %.2f ms (budget %.2f ms)", self.spec.name, latency / 1e6, self.budget_ns / 1e6)
        if prediction is None:
            return
        toa = self.clock.now_ns()
        sample = Sample.from_array(self.topic, self.seq, toa, 0, np.atleast_1d(np.asarray(prediction)))
        self.seq += 1
        self.fifo.push_head(sample)
        self.client.publish(sample)

    @property
    def fifos(self) -> dict[str, StreamFifo]:
        return {self.topic: self.fifo}

    @property
    def captured(self) -> Counter:
        return Counter({self.topic: self.seq})

    def stats(self) -> dict:
        s = super().stats()
        lat = self.latencies_ns[-1000:]
        s.update(
            inferences=self.inferences,
            coalesced=self.coalesced,
            empty_triggers=self.empty_triggers,
            over_budget=self.over_budget,
            mean_latency_ms=(sum(lat) / len(lat) / 1e6) if lat else None,
        )
        return s


def run_producer(spec: NodeSpec, adapter: DeviceAdapter, broker_address, stop: threading.Event, **kw) -> Producer:
    node = Producer(spec, adapter, broker_address, **kw)
    node.run(stop)
    return node


def run_consumer(spec: NodeSpec, handler, broker_address, stop: threading.Event, **kw) -> Consumer:
    node = Consumer(spec, handler, broker_address, **kw)
    node.run(stop)
    return node


def run_pipeline(spec: NodeSpec, infer, align: AlignConfig, broker_address, stop: threading.Event, **kw) -> Pipeline:
    node = Pipeline(spec, infer, align, broker_address=broker_address, **kw)
    node.run(stop)
    return node


@dataclass
class ShutdownReport:
    hosts: dict[str, dict] = field(default_factory=dict)
    unresponsive: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.unresponsive

    def to_dict(self) -> dict:
        return {"ok": self.ok, "hosts": self.hosts, "unresponsive": self.unresponsive}


def coordinate_shutdown(broker_address, hosts, timeout_s: float = 10.0) -> ShutdownReport:
    """Publish ``__ctl/shutdown`` and collect each host's final report.

    Hosts that do not report within ``timeout_s`` are listed as unresponsive;
    the others still shut down cleanly.
    """
    hosts = list(hosts)
    report = ShutdownReport()
    if not hosts:
        return report
    with BrokerClient(broker_address, name="coordinator") as client:
        client.subscribe(CTL_REPORT)
        client.ping()
        client.publish(control_sample(CTL_SHUTDOWN, json.dumps({"hosts": hosts}), 0, time.time_ns()))
        deadline = time.monotonic() + timeout_s
        pending = set(hosts)
        while pending and (remaining := deadline - time.monotonic()) > 0:
            sample = client.recv(min(remaining, 0.1))
            if sample is None or not sample.topic.startswith(CTL_REPORT + "/"):
                continue
            host = sample.topic[len(CTL_REPORT) + 1 :]
            report.hosts[host] = json.loads(bytes(sample.payload))
            pending.discard(host)
    report.unresponsive = sorted(pending)
    return report


def coalesced_ticks(late_ns: int, period_ns: int) -> int:
    """Ticks skipped when a trigger runs ``late_ns`` after its due time."""
    if late_ns < 0:
        return 0
    return math.floor(late_ns / period_ns)
