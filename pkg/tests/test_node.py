import json
import threading
import time

import numpy as np
import pytest

from conftest import free_port, wait_for
from mmstream.align import AlignConfig
from mmstream.broker import CTL_REPORT, CTL_SHUTDOWN, Broker, BrokerClient
from mmstream.errors import AdapterFailure, NodeSpecError
from mmstream.node import (
    CONSUMER,
    PIPELINE,
    PRODUCER,
    PULL,
    PUSH,
    Consumer,
    DeviceAdapter,
    NodeSpec,
    Pipeline,
    Producer,
    Reading,
    coalesced_ticks,
    coordinate_shutdown,
)
from mmstream.wire import Sample, control_sample

MS = 1_000_000


class Scripted(DeviceAdapter):
    def __init__(self, script):
        self.script = list(script)

    def poll(self):
        return self.script.pop(0) if self.script else []

    def measure_roundtrip(self):
        return 4 * MS


class Ticking(DeviceAdapter):
    """One reading every ``period_s`` of wall time."""

    def __init__(self, topic, period_s):
        self.topic, self.period_s = topic, period_s
        self.n = 0
        self.t0 = None

    def start(self):
        self.t0 = time.monotonic()

    def poll(self):
        due = int((time.monotonic() - self.t0) / self.period_s)
        out = [Reading(self.topic, np.array([i], dtype=np.int64)) for i in range(self.n, due)]
        self.n = due
        return out


class FixedClock:
    def __init__(self, t):
        self.t = t

    def now_ns(self):
        return self.t


def producer_spec(*topics):
    return NodeSpec("prod", PRODUCER, "h", publishes=list(topics))


def test_node_spec_shape():
    with pytest.raises(NodeSpecError):
        NodeSpec("x", PRODUCER, "h", publishes=["a"], subscribes=["b"])
    with pytest.raises(NodeSpecError):
        NodeSpec("x", CONSUMER, "h")
    with pytest.raises(NodeSpecError):
        NodeSpec("x", "sink", "h", publishes=["a"])
    with pytest.raises(NodeSpecError):
        Producer(NodeSpec("c", CONSUMER, "h", subscribes=["a"]), Scripted([]), ("127.0.0.1", 1))


def test_producer_stamps_one_arrival_time_per_poll(broker):
    batch = [Reading(t, np.zeros(3, np.float32)) for t in ("imu/a", "imu/b", "imu/c")]
    p = Producer(producer_spec("imu/a", "imu/b", "imu/c"), Scripted([batch]), broker.address,
                 clock=FixedClock(10**9))
    p.setup()
    assert p.step() == 3
    samples = [p.fifos[t].pop_tail() for t in ("imu/a", "imu/b", "imu/c")]
    assert {s.time_of_arrival_ns for s in samples} == {10**9}
    assert {s.time_of_generation_ns for s in samples} == {10**9 - 2 * MS}  # d_hat is half the 4 ms roundtrip
    assert p.counters["published"] == 3
    p.teardown()


def test_producer_idle_adapter(broker):
    p = Producer(producer_spec("x/y"), Scripted([]), broker.address)
    stop = threading.Event()
    p.start(stop)
    time.sleep(1.0)
    stop.set()
    p.join(2)
    assert p.counters["captured"] == 0 and len(p.fifos["x/y"]) == 0 and p.error is None


def test_adapter_exception_becomes_adapter_failure(broker):
    class Broken(DeviceAdapter):
        def poll(self):
            raise RuntimeError("usb gone")

    p = Producer(producer_spec("x/y"), Broken(), broker.address)
    p.run(threading.Event())
    assert isinstance(p.error, AdapterFailure) and p.faults == 1


def test_broker_outage_loses_nothing_locally():
    port = free_port()
    b = Broker("local", ("127.0.0.1", port)).start()
    prod = Producer(producer_spec("emg/raw"), Ticking("emg/raw", 0.01), ("127.0.0.1", port),
                    delay_probe_period_s=None)
    stop = threading.Event()
    prod.start(stop)
    try:
        time.sleep(0.5)
        b.stop()
        time.sleep(2.0)
        failed_during = prod.counters["unpublished"]
        assert failed_during > 100
        b = Broker("local", ("127.0.0.1", port)).start()
        with BrokerClient(b.address, name="sub") as sub:
            sub.subscribe("emg")
            sub.ping()
            got = sub.recv(3)
            assert got is not None and got.topic == "emg/raw"
    finally:
        stop.set()
        prod.join(3)
        b.stop()
    seqs = [s.seq for s in prod.fifos["emg/raw"].drain_all()]
    assert seqs == list(range(prod.captured["emg/raw"]))
    assert prod.counters["published"] + prod.counters["unpublished"] == len(seqs)
    assert prod.client.reconnects >= 1


def test_consumer_order_and_handler_errors(broker):
    seen = []

    def handler(s):
        if s.seq == 5:
            raise ValueError("boom")
        seen.append(s.seq)

    c = Consumer(NodeSpec("c", CONSUMER, "h", subscribes=["imu", "imu/left"]), handler, broker.address)
    stop = threading.Event()
    c.start(stop)
    assert wait_for(lambda: {p for _, p in broker.subscriptions()} == {"imu", "imu/left"})
    with BrokerClient(broker.address, name="pub") as pub:
        for i in range(10):
            pub.publish(Sample.from_array("imu/left", i, i + 1, 0, np.zeros(2)))
    assert wait_for(lambda: c.counters["received"] == 10)
    time.sleep(0.1)
    stop.set()
    c.join(2)
    assert seen == [0, 1, 2, 3, 4, 6, 7, 8, 9]
    assert c.handler_errors == 1 and c.counters["received"] == 10


def pipeline(broker, strategy, rate=None, sources=("a/x", "b/x", "c/x")):
    spec = NodeSpec("pipe", PIPELINE, "h", publishes=["pred/out"], subscribes=[s.split("/")[0] for s in sources])
    align = AlignConfig(list(sources), stale_ns=20 * MS, nominal_period_ns=100 * MS)
    return Pipeline(spec, lambda ep: [ep.present], align, strategy=strategy, pull_rate_hz=rate,
                    broker_address=broker.address)


def feed(broker, sources, rate_hz, seconds):
    with BrokerClient(broker.address, name="feed") as pub:
        n = int(rate_hz * seconds)
        t0 = time.monotonic()
        for k in range(n):
            for i, src in enumerate(sources):
                time.sleep(max(0.0, t0 + (k + i / len(sources)) / rate_hz - time.monotonic()))
                now = time.time_ns()
                pub.publish(Sample.from_array(src, k, now, now, np.zeros(1)))
        pub.ping()


def test_push_pipeline_runs_once_per_arrival(broker):
    p = pipeline(broker, PUSH)
    stop = threading.Event()
    p.start(stop)
    assert wait_for(lambda: len(broker.subscriptions()) == 3)
    feed(broker, ["a/x", "b/x", "c/x"], 10, 2.0)
    assert wait_for(lambda: p.inferences + p.coalesced == 60)
    stop.set()
    p.join(2)
    assert p.inferences >= 50  # ~30 per second; idle CPU leaves little to coalesce
    assert p.captured["pred/out"] == p.inferences


def test_pull_pipeline_runs_at_fixed_rate(broker):
    p = pipeline(broker, PULL, rate=10)
    stop = threading.Event()
    p.start(stop)
    assert wait_for(lambda: len(broker.subscriptions()) == 3)
    t0 = time.monotonic()
    feed(broker, ["a/x", "b/x", "c/x"], 50, 2.0)
    stop.set()
    p.join(2)
    elapsed = time.monotonic() - t0
    ticks = p.inferences + p.empty_triggers + p.coalesced
    assert abs(ticks - 10 * elapsed) <= 3
    assert p.inferences >= ticks - 3


def test_pipeline_needs_rate_for_pull(broker):
    with pytest.raises(ValueError):
        pipeline(broker, PULL)


def test_coalesced_ticks():
    assert coalesced_ticks(-5, 10) == 0
    assert coalesced_ticks(9, 10) == 0
    assert coalesced_ticks(25, 10) == 2


def test_shutdown_with_no_hosts(broker):
    rep = coordinate_shutdown(broker.address, [], timeout_s=0.1)
    assert rep.ok and rep.hosts == {}


def test_shutdown_flags_unresponsive_host(broker):
    def answer(sample):
        if sample.topic == CTL_SHUTDOWN:
            host.publish(control_sample(f"{CTL_REPORT}/alive", json.dumps({"stored": {"a": 3}})))

    host = BrokerClient(broker.address, name="alive", on_message=answer).connect()
    host.subscribe(CTL_SHUTDOWN)
    host.ping()
    try:
        rep = coordinate_shutdown(broker.address, ["alive", "ghost"], timeout_s=0.5)
    finally:
        host.close()
    assert not rep.ok and rep.unresponsive == ["ghost"]
    assert rep.hosts["alive"] == {"stored": {"a": 3}}
    assert rep.to_dict()["ok"] is False
