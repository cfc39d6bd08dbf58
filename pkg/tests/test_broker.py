import socket
import threading
import time

import pytest

from mmstream.broker import Broker, BrokerClient, parse_endpoint
from mmstream.errors import PortBusy
from mmstream.wire import DType, Sample, encode_message

from conftest import wait_for
from oracles import header_bytes


def sample(topic, seq, nbytes=8):
    return Sample(topic, seq, seq + 1, 0, DType.U8, (nbytes,), bytes(nbytes))


def drain(client, n, timeout=5.0):
    out = []
    while len(out) < n:
        s = client.recv(timeout)
        if s is None:
            break
        out.append(s)
    return out


def test_parse_endpoint():
    assert parse_endpoint("tcp://127.0.0.1:7701") == ("127.0.0.1", 7701)
    assert parse_endpoint("localhost:9") == ("localhost", 9)
    assert parse_endpoint(("h", 5)) == ("h", 5)
    for bad in ("udp://h:1", "h", "tcp://h"):
        with pytest.raises(ValueError):
            parse_endpoint(bad)


def test_port_busy(broker):
    with pytest.raises(PortBusy):
        Broker("dup", broker.address).start()


def test_cross_host_exactly_once(mesh):
    a, b = mesh
    with BrokerClient(b.address, "sub") as sub, BrokerClient(a.address, "pub") as pub:
        sub.subscribe("emg")
        assert sub.ping()
        assert wait_for(lambda: any(p == "emg" for _, p in a.subscriptions()))
        for i in range(200):
            pub.publish(sample("emg/raw", i))
        got = drain(sub, 200)
        assert [s.seq for s in got] == list(range(200))
        assert sub.recv(0.2) is None


def test_no_subscribers_means_no_bytes(broker):
    with BrokerClient(broker.address, "pub") as pub:
        for i in range(100):
            pub.publish(sample("cam/front", i, 1000))
        assert wait_for(lambda: broker.stats.received == 100)
    assert broker.stats.bytes_out == 0
    assert broker.stats.routed == 0


def test_unsubscribed_topic_not_forwarded_to_peer(mesh):
    a, b = mesh
    received0, out0, b_received0 = a.stats.received, a.stats.bytes_out, b.stats.received
    with BrokerClient(a.address, "pub") as pub:
        for i in range(50):
            pub.publish(sample("cam/side", i, 500))
        assert wait_for(lambda: a.stats.received - received0 == 50)
    assert a.stats.bytes_out == out0
    assert b.stats.received == b_received0


def test_overlapping_prefixes_deliver_once(broker):
    with BrokerClient(broker.address, "sub") as sub, BrokerClient(broker.address, "pub") as pub:
        sub.subscribe("imu")
        sub.subscribe("imu/joint_angles")
        sub.subscribe("imu")
        assert sub.ping()
        for i in range(20):
            pub.publish(sample("imu/joint_angles", i))
        got = drain(sub, 20)
        assert [s.seq for s in got] == list(range(20))
        assert sub.recv(0.2) is None


def test_unsubscribe_stops_delivery(broker):
    with BrokerClient(broker.address, "sub") as sub, BrokerClient(broker.address, "pub") as pub:
        sub.subscribe("pred")
        assert sub.ping()
        pub.publish(sample("pred", 0))
        assert sub.recv(2).seq == 0
        sub.unsubscribe("pred")
        assert sub.ping()
        pub.publish(sample("pred", 1))
        assert pub.ping()
        assert sub.recv(0.2) is None


def test_local_and_remote_subscribers_keep_per_publisher_order(mesh):
    a, b = mesh
    n = 500
    with BrokerClient(a.address, "local") as local, BrokerClient(b.address, "remote") as remote, \
            BrokerClient(a.address, "p1") as p1, BrokerClient(a.address, "p2") as p2:
        for c in (local, remote):
            c.subscribe("imu")
            assert c.ping()
        assert wait_for(lambda: any(p == "imu" for _, p in a.subscriptions() if _.startswith("peer")))

        def run(client, topic):
            for i in range(n):
                client.publish(sample(topic, i))

        threads = [threading.Thread(target=run, args=(p1, "imu/a")), threading.Thread(target=run, args=(p2, "imu/b"))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for c in (local, remote):
            got = drain(c, 2 * n)
            assert len(got) == 2 * n
            for topic in ("imu/a", "imu/b"):
                assert [s.seq for s in got if s.topic == topic] == list(range(n))


def test_malformed_message_rejected_connection_survives(broker):
    with BrokerClient(broker.address, "sub") as sub:
        sub.subscribe("x")
        assert sub.ping()
        raw = socket.create_connection(broker.address)
        try:
            bad = [b"x", header_bytes(0, 0, 0, DType.U8, [4], version=7), b"abcd"]
            raw.sendall(b"".join(len(f).to_bytes(4, "little") + f for f in bad))
            wrong_len = [b"x", header_bytes(0, 0, 0, DType.U8, [4]), b"abc"]
            raw.sendall(b"".join(len(f).to_bytes(4, "little") + f for f in wrong_len))
            raw.sendall(encode_message(sample("x", 9)))
            s = sub.recv(3)
            assert s is not None and s.seq == 9
            assert broker.stats.rejected == 2
        finally:
            raw.close()


def test_slow_subscriber_is_disconnected_others_unaffected():
    with Broker("slow", queue_limit=50) as b:
        stalled = socket.create_connection(b.address)
        stalled.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4096)
        stalled.sendall(encode_message(Sample("__ctl/sub", 0, 0, 0, DType.U8, (3,), b"big")))
        with BrokerClient(b.address, "fast") as fast, BrokerClient(b.address, "pub") as pub:
            fast.subscribe("big")
            assert fast.ping()
            n = 600
            received = []
            t = threading.Thread(target=lambda: received.extend(drain(fast, n, timeout=10)))
            t.start()
            for i in range(n):
                pub.publish(sample("big", i, 65536))
                time.sleep(0.001)
            t.join()
            assert [s.seq for s in received] == list(range(n))
            assert b.stats.slow_disconnects == 1
        stalled.close()
