"""Everything one host runs: broker, clock sync, storage and its nodes."""

from __future__ import annotations

import importlib
import json
import logging
import threading
import time
from collections import Counter
from pathlib import Path

import numpy as np

from .align import AlignConfig, AlignedEpoch
from .broker import CTL_REPORT, CTL_SHUTDOWN, Broker, BrokerClient
from .config import NodeConfig, SessionConfig
from .node import CONSUMER, PIPELINE, PRODUCER, Consumer, DeviceAdapter, Node, Pipeline, Producer, Reading
from .simharness import SimDeviceAdapter
from .storage import FlushPolicy, FrameSink, StorageAgent
from .timesync import DisciplinedClock, HostClock, SyncAgent, SyncServer
from .wire import control_sample

log = logging.getLogger(__name__)

NS_PER_MS = 1_000_000


class MultiAdapter(DeviceAdapter):
    """Polls several single-topic adapters as one device."""

    def __init__(self, adapters: list[DeviceAdapter]) -> None:
        self.adapters = adapters

    def start(self) -> None:
        for a in self.adapters:
            a.start()

    def poll(self) -> list[Reading]:
        out: list[Reading] = []
        for a in self.adapters:
            out.extend(a.poll())
        return out

    def measure_roundtrip(self) -> int | None:
        rts = [r for r in (a.measure_roundtrip() for a in self.adapters) if r is not None]
        return min(rts) if rts else None

    def close(self) -> None:
        for a in self.adapters:
            a.close()


def stub_inference(latency_ms: float):
    """Inference stand-in that takes exactly ``latency_ms`` and returns the epoch's fill level."""
    latency_s = latency_ms / 1e3

    def infer(epoch: AlignedEpoch):
        deadline = time.perf_counter() + latency_s
        if latency_s > 0.002:
            time.sleep(latency_s - 0.001)
        while time.perf_counter() < deadline:
            pass
        return np.array([epoch.present, epoch.missing_mask], dtype=np.float32)

    return infer


class CountingHandler:
    def __init__(self) -> None:
        self.counts: Counter = Counter()

    def __call__(self, sample) -> None:
        self.counts[sample.topic] += 1


def resolve(ref: str, **kwargs):
    """``builtin:<name>`` or ``package.module:attribute``."""
    if ref == "builtin:count":
        return CountingHandler()
    if ref == "builtin:stub":
        return stub_inference(kwargs.get("latency_ms", 0.0))
    module, _, attr = ref.partition(":")
    if not attr:
        raise ValueError(f"callable reference {ref!r} must look like module:attribute")
    return getattr(importlib.import_module(module), attr)


def align_config(node: NodeConfig) -> AlignConfig:
    a = node.align
    period = a.nominal_period_ms
    period_ns = {k: round(v * NS_PER_MS) for k, v in period.items()} if isinstance(period, dict) else round(period * NS_PER_MS)
    return AlignConfig(
        sources=list(a.sources or node.subscribes),
        stale_ns=round(a.stale_ms * NS_PER_MS),
        nominal_period_ns=period_ns,
        pairing_window_ns=None if a.pairing_window_ms is None else round(a.pairing_window_ms * NS_PER_MS),
        late_policy=a.late_policy,
    )


class HostRuntime:
    """Lifecycle of one host id of a session config."""

    def __init__(self, config: SessionConfig, host_id: str, output_dir: str | Path | None = None,
                 sync_wait_s: float = 5.0) -> None:
        self.config = config
        self.host = config.host(host_id)
        self.host_id = host_id
        self.out_dir = config.session_dir(output_dir) / host_id
        self.sync_wait_s = sync_wait_s
        self.nodes: list[Node] = []
        self.sinks: dict[str, FrameSink] = {}
        self.stop_event = threading.Event()
        self.shutdown_requested = threading.Event()
        self.reports: dict[str, dict] = {}
        self._reports_cv = threading.Condition()
        self.broker: Broker | None = None
        self.storage: StorageAgent | None = None
        self.sync = None
        self.ctl: BrokerClient | None = None
        self.started_ns = 0

    @property
    def is_reference(self) -> bool:
        return self.host.reference_clock

    # construction ----------------------------------------------------------
    def _build_node(self, nc: NodeConfig) -> Node:
        spec = nc.node_spec()
        addr = self.broker.address
        if nc.kind == PRODUCER:
            if nc.sim is not None:
                sim = nc.sim_spec()
                if nc.video is not None:
                    sim.payload_bytes = nc.video.width * nc.video.height * nc.video.channels
                adapters = [
                    SimDeviceAdapter(topic, sim, seed=nc.seed + 1000 * i, speedup=self.config.sim_speedup)
                    for i, topic in enumerate(nc.publishes)
                ]
                adapter = adapters[0] if len(adapters) == 1 else MultiAdapter(adapters)
            else:
                adapter = resolve(nc.adapter)(nc)
            if nc.video is not None:
                for topic in nc.publishes:
                    v = nc.video
                    self.sinks[topic] = FrameSink(topic, self.out_dir, v.width, v.height, v.fps, v.encoder_cmd, v.channels)
            return Producer(spec, adapter, addr, clock=self.clock)
        if nc.kind == CONSUMER:
            return Consumer(spec, resolve(nc.handler), addr, clock=self.clock)
        assert nc.kind == PIPELINE
        infer = resolve(nc.infer, latency_ms=nc.infer_latency_ms)
        return Pipeline(spec, infer, align_config(nc), strategy=nc.align.strategy,
                        pull_rate_hz=nc.align.rate_hz, broker_address=addr, clock=self.clock)

    def fifos(self) -> dict:
        out = {}
        for node in self.nodes:
            out.update(getattr(node, "fifos", {}))
        return out

    def captured(self) -> dict[str, int]:
        out: Counter = Counter()
        for node in self.nodes:
            out.update(getattr(node, "captured", {}))
        return dict(out)

    # lifecycle -------------------------------------------------------------
    def start(self) -> HostRuntime:
        cfg, host = self.config, self.host
        self.started_ns = time.time_ns()
        peers = {h.id: h.endpoint for h in cfg.hosts if h.id != self.host_id}
        self.broker = Broker(self.host_id, host.endpoint, peers).start()
        raw = HostClock(round(host.clock_offset_ms * NS_PER_MS), host.clock_drift_ppm)
        self.clock = DisciplinedClock(raw)
        addr = self.broker.address
        self.ctl = BrokerClient(addr, name=f"ctl:{self.host_id}", on_message=self._on_ctl, reconnect=True).connect()
        self.ctl.subscribe(CTL_SHUTDOWN)
        if self.is_reference:
            self.ctl.subscribe(CTL_REPORT)
        self.ctl.ping()
        if self.is_reference:
            self.sync = SyncServer(addr, self.clock).start()
        else:
            s = cfg.sync
            self.sync = SyncAgent(
                self.host_id, addr, self.clock,
                resync_period_ns=round(s.resync_period_s * 1e9),
                step_threshold_ns=round(s.step_threshold_ms * NS_PER_MS),
                slew_rate_ppm=s.slew_rate_ppm, probes=s.probes,
            ).start()
            if not self.sync.synced.wait(self.sync_wait_s):
                log.warning("%s: no clock sync with the reference yet; capturing on the raw clock", self.host_id)

        self.nodes = [self._build_node(nc) for nc in cfg.nodes_on(self.host_id)]
        manifest = {
            "session": cfg.session,
            "host": self.host_id,
            "hosts": [h.id for h in cfg.hosts],
            "reference": cfg.reference.id,
            "sim_speedup": cfg.sim_speedup,
            "started_ns": self.started_ns,
            "config": cfg.to_dict(),
        }
        self.storage = StorageAgent(
            FlushPolicy(round(host.flush_period_s * 1e9), self.out_dir), self.fifos, manifest, sinks=self.sinks
        )
        self.storage.start()
        capture_ns = time.time_ns()
        for node in self.nodes:
            if isinstance(node, Producer):
                node.adapter.start()
        self.storage.write_manifest(capture_started_ns=capture_ns, clock_model=self.clock.model.to_dict())
        for node in self.nodes:
            node.start(self.stop_event)
        log.info("%s running %d nodes, broker at %s", self.host_id, len(self.nodes), self.broker.endpoint)
        return self

    def _on_ctl(self, sample) -> None:
        if sample.topic == CTL_SHUTDOWN:
            try:
                hosts = json.loads(bytes(sample.payload) or b"{}").get("hosts")
            except ValueError:
                hosts = None
            if not hosts or self.host_id in hosts:
                self.shutdown_requested.set()
        elif sample.topic.startswith(CTL_REPORT + "/"):
            with self._reports_cv:
                self.reports[sample.topic[len(CTL_REPORT) + 1 :]] = json.loads(bytes(sample.payload))
                self._reports_cv.notify_all()

    def wait(self, timeout: float | None = None) -> bool:
        """Block until shutdown is requested (True) or ``timeout`` elapses (False)."""
        return self.shutdown_requested.wait(timeout)

    def report(self) -> dict:
        captured = self.captured()
        stored = dict(self.storage.stored) if self.storage else {}
        faults = {n.spec.name: n.faults for n in self.nodes if n.faults}
        errors = {n.spec.name: str(n.error) for n in self.nodes if n.error is not None}
        return {
            "host": self.host_id,
            "captured": captured,
            "stored": stored,
            "reconciled": all(stored.get(t, 0) == c for t, c in captured.items()),
            "nodes": {n.spec.name: n.stats() for n in self.nodes},
            "faults": faults,
            "errors": errors,
            "storage_halted": self.storage.halted if self.storage else None,
            "clock_model": self.clock.model.to_dict(),
        }

    @property
    def faulted(self) -> bool:
        return any(n.error is not None for n in self.nodes) or bool(self.storage and self.storage.halted)

    def shutdown(self) -> dict:
        """Stop nodes, flush everything, publish the final report, then take the broker down."""
        t0 = time.monotonic()
        self.stop_event.set()
        for node in self.nodes:
            node.join(10.0)
        log.info("%s: nodes stopped after %.2f s", self.host_id, time.monotonic() - t0)
        if self.storage is not None:
            self.storage.stop(final_flush=True)
        log.info("%s: final flush done after %.2f s", self.host_id, time.monotonic() - t0)
        if self.sync is not None:
            if isinstance(self.sync, SyncAgent):
                self.sync.stop()
            else:
                self.sync.close()
        report = self.report()
        if self.storage is not None:
            self.storage.write_manifest(
                captured=report["captured"], reconciled=report["reconciled"], clock_model=report["clock_model"],
                nodes=report["nodes"],
            )
        if self.ctl is not None:
            self.ctl.publish(control_sample(f"{CTL_REPORT}/{self.host_id}", json.dumps(report)))
            self.ctl.ping()
            if self.is_reference:
                # stay reachable until the other hosts' reports have passed through
                others = {h.id for h in self.config.hosts} - {self.host_id}
                deadline = time.monotonic() + self.config.shutdown_timeout_s
                with self._reports_cv:
                    while not others <= set(self.reports) and (left := deadline - time.monotonic()) > 0:
                        self._reports_cv.wait(left)
        log.info("%s: report sent after %.2f s", self.host_id, time.monotonic() - t0)
        if self.broker is not None:
            self.broker.drain(2.0)
            time.sleep(0.1)
        if self.ctl is not None:
            self.ctl.close()
        if self.broker is not None:
            self.broker.stop(drain_timeout=1.0)
        return report
