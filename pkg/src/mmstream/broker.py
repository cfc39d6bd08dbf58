"""Per-host topic broker and the blocking client used by nodes.

Every connection carries only wire-format messages.  A few reserved topics
are consumed by the broker itself instead of being routed:

``__ctl/sub`` / ``__ctl/unsub``   payload = utf-8 topic prefix
``__ctl/hello``                   payload = JSON ``{"host": ..., "peer": true}``
``__ctl/ping``                    answered with ``__ctl/pong`` on the same connection

Brokers form a full mesh.  Each broker dials every configured peer and
forwards the union of its local clients' prefixes over that outbound link;
the peer then streams matching samples back down the same link.  Samples that
arrive from a peer are delivered to local clients only, so nothing loops.
"""

from __future__ import annotations

import asyncio
import collections
import json
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from .errors import BrokerUnreachable, PortBusy, WireError
from .wire import Sample, SubscriptionTable, check_frames, control_sample, decode_message, encode_message

log = logging.getLogger(__name__)

CTL_SUB = "__ctl/sub"
CTL_UNSUB = "__ctl/unsub"
CTL_HELLO = "__ctl/hello"
CTL_PING = "__ctl/ping"
CTL_PONG = "__ctl/pong"
CTL_SHUTDOWN = "__ctl/shutdown"
CTL_REPORT = "__ctl/report"
BROKER_TOPICS = frozenset({CTL_SUB, CTL_UNSUB, CTL_HELLO, CTL_PING})

DEFAULT_QUEUE_LIMIT = 10_000
_LEN = struct.Struct("<I")
_MAX_FRAME = 1 << 31


def parse_endpoint(endpoint: str | tuple) -> tuple[str, int]:
    """``"tcp://host:port"``, ``"host:port"`` or ``(host, port)``."""
    if isinstance(endpoint, (tuple, list)):
        return str(endpoint[0]), int(endpoint[1])
    text = str(endpoint)
    if "://" in text:
        scheme, _, text = text.partition("://")
        if scheme != "tcp":
            raise ValueError(f"unsupported endpoint scheme {scheme!r}")
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint {endpoint!r} lacks a port")
    return host or "127.0.0.1", int(port)


@dataclass
class BrokerStats:
    received: int = 0
    routed: int = 0
    deliveries: int = 0
    rejected: int = 0
    bytes_out: int = 0
    slow_disconnects: int = 0
    per_topic: collections.Counter = field(default_factory=collections.Counter)


class _Endpoint:
    _ids = 0

    def __init__(self, kind: str, writer: asyncio.StreamWriter, limit: int, name: str = "") -> None:
        _Endpoint._ids += 1
        self.id = _Endpoint._ids
        self.kind = kind  # "client" | "peer-in" | "peer-out"
        self.name = name or f"{kind}-{self.id}"
        self.writer = writer
        self.queue: asyncio.Queue = asyncio.Queue(maxsize=limit)
        self.bytes_sent = 0
        self.closed = False
        self.task: asyncio.Task | None = None

    @property
    def remote(self) -> bool:
        return self.kind != "client"

    def __repr__(self) -> str:
        return f"<Endpoint {self.name}>"


async def _read_message(reader: asyncio.StreamReader) -> tuple[list[bytes], list[bytes]]:
    frames, raw = [], []
    for _ in range(3):
        prefix = await reader.readexactly(4)
        (n,) = _LEN.unpack(prefix)
        if n > _MAX_FRAME:
            raise ConnectionError(f"frame of {n} bytes")
        frame = await reader.readexactly(n)
        raw += (prefix, frame)
        frames.append(frame)
    return frames, raw


class Broker:
    """Routing loop for one host; runs an asyncio loop in a background thread."""

    def __init__(
        self,
        host_id: str = "local",
        listen: str | tuple = ("127.0.0.1", 0),
        peers: dict[str, str | tuple] | None = None,
        queue_limit: int = DEFAULT_QUEUE_LIMIT,
    ) -> None:
        self.host_id = host_id
        self._listen = parse_endpoint(listen)
        self.peers = {h: parse_endpoint(e) for h, e in (peers or {}).items() if h != host_id}
        self.queue_limit = queue_limit
        self.table = SubscriptionTable()
        self.stats = BrokerStats()
        self._endpoints: set[_Endpoint] = set()
        self._peer_links: dict[str, _Endpoint] = {}
        self._local_prefixes: collections.Counter = collections.Counter()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._server: asyncio.AbstractServer | None = None
        self._thread: threading.Thread | None = None
        self._started = threading.Event()
        self._start_error: BaseException | None = None
        self._stopping = False
        self.address: tuple[str, int] | None = None

    # lifecycle -----------------------------------------------------------
    def start(self) -> Broker:
        self._thread = threading.Thread(target=self._run, name=f"broker-{self.host_id}", daemon=True)
        self._thread.start()
        self._started.wait()
        if self._start_error is not None:
            raise self._start_error
        return self

    def _run(self) -> None:
        loop = asyncio.new_event_loop()
        self._loop = loop
        try:
            loop.run_until_complete(self._open())
        except OSError as exc:
            self._start_error = PortBusy(f"cannot listen on {self._listen}: {exc}")
            self._started.set()
            loop.close()
            return
        self._started.set()
        try:
            loop.run_forever()
        finally:
            loop.run_until_complete(self._close())
            loop.close()

    async def _open(self) -> None:
        self._server = await asyncio.start_server(self._accept, *self._listen)
        self.address = self._server.sockets[0].getsockname()[:2]
        for host, addr in self.peers.items():
            asyncio.ensure_future(self._dial(host, addr))

    async def _close(self) -> None:
        self._stopping = True
        if self._server is not None:
            self._server.close()
        for ep in list(self._endpoints):
            self._drop(ep)
        tasks = [t for t in asyncio.all_tasks() if t is not asyncio.current_task()]
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)

    def stop(self, drain_timeout: float = 0.0) -> None:
        if self._loop is None or not self._loop.is_running():
            return
        if drain_timeout > 0:
            self.drain(drain_timeout)
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(timeout=5)

    def drain(self, timeout: float = 2.0) -> bool:
        """Wait until every outbound queue is empty and flushed to its socket."""
        def idle() -> bool:
            return all(
                ep.queue.empty() and ep.writer.transport.get_write_buffer_size() == 0
                for ep in self._endpoints
            )

        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.call(idle):
                return True
            time.sleep(0.005)
        return False

    @property
    def endpoint(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    def __enter__(self) -> Broker:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # connections -----------------------------------------------------------
    async def _accept(self, reader, writer) -> None:
        _nodelay(writer)
        ep = self._register("client", writer)
        await self._serve(ep, reader)

    async def _dial(self, host: str, addr: tuple[str, int]) -> None:
        backoff = 0.01
        while not self._stopping:
            try:
                reader, writer = await asyncio.open_connection(*addr)
            except OSError:
                await asyncio.sleep(backoff)
                backoff = min(backoff * 2, 1.0)
                continue
            backoff = 0.01
            _nodelay(writer)
            ep = self._register("peer-out", writer, name=f"peer:{host}")
            self._peer_links[host] = ep
            self._send(ep, encode_message(control_sample(CTL_HELLO, json.dumps({"host": self.host_id, "peer": True}))))
            for prefix in self._local_prefixes:
                self._send(ep, encode_message(control_sample(CTL_SUB, prefix)))
            log.info("%s linked to peer %s at %s", self.host_id, host, addr)
            await self._serve(ep, reader)
            self._peer_links.pop(host, None)
            if not self._stopping:
                log.warning("%s lost link to peer %s; redialing", self.host_id, host)

    def _register(self, kind, writer, name="") -> _Endpoint:
        ep = _Endpoint(kind, writer, self.queue_limit, name)
        ep.task = asyncio.ensure_future(self._pump(ep))
        self._endpoints.add(ep)
        return ep

    async def _serve(self, ep: _Endpoint, reader: asyncio.StreamReader) -> None:
        try:
            while not ep.closed:
                frames, raw = await _read_message(reader)
                self._on_message(ep, frames, raw)
        except (asyncio.IncompleteReadError, ConnectionError, OSError):
            pass
        finally:
            self._drop(ep)

    async def _pump(self, ep: _Endpoint) -> None:
        q, writer = ep.queue, ep.writer
        try:
            while True:
                data = await q.get()
                writer.write(data)
                n = len(data)
                while not q.empty():
                    data = q.get_nowait()
                    writer.write(data)
                    n += len(data)
                ep.bytes_sent += n
                self.stats.bytes_out += n
                await writer.drain()
        except (ConnectionError, OSError):
            self._drop(ep)
        except asyncio.CancelledError:
            pass

    def _drop(self, ep: _Endpoint) -> None:
        if ep.closed:
            return
        ep.closed = True
        self._endpoints.discard(ep)
        if ep.kind == "client":
            for prefix in self.table.prefixes(ep):
                self._release_local(prefix)
        self.table.remove(ep)
        try:
            ep.writer.close()
        except Exception:  # pragma: no cover - transport already gone
            pass
        if ep.task is not None and ep.task is not asyncio.current_task():
            ep.task.cancel()

    # routing ---------------------------------------------------------------
    def _send(self, ep: _Endpoint, data: bytes) -> bool:
        if ep.closed:
            return False
        try:
            ep.queue.put_nowait(data)
        except asyncio.QueueFull:
            self.stats.slow_disconnects += 1
            log.warning("slow subscriber %s exceeded %d queued messages; disconnecting", ep.name, self.queue_limit)
            self._drop(ep)
            return False
        return True

    def _on_message(self, src: _Endpoint, frames: list[bytes], raw: list[bytes]) -> None:
        self.stats.received += 1
        try:
            topic = check_frames(frames)
        except WireError as exc:
            self.stats.rejected += 1
            log.warning("rejected message from %s: %s", src.name, exc)
            return
        if topic in BROKER_TOPICS:
            self._control(src, topic, bytes(frames[2]))
            return
        dests = self.table.destinations(topic, exclude=src)
        if not dests:
            return
        if src.remote:
            dests = [d for d in dests if d.kind == "client"]
            if not dests:
                return
        data = b"".join(raw)
        self.stats.routed += 1
        self.stats.per_topic[topic] += 1
        for dest in dests:
            if self._send(dest, data):
                self.stats.deliveries += 1

    def _control(self, src: _Endpoint, topic: str, payload: bytes) -> None:
        if topic == CTL_PING:
            self._send(src, encode_message(control_sample(CTL_PONG, payload)))
            return
        if topic == CTL_HELLO:
            info = json.loads(payload or b"{}")
            if info.get("peer") and src.kind == "client":
                src.kind = "peer-in"
                src.name = f"peer-in:{info.get('host')}"
            return
        prefix = payload.decode("utf-8")
        if topic == CTL_SUB:
            try:
                added = self.table.add(src, prefix)
            except WireError as exc:
                self.stats.rejected += 1
                log.warning("bad subscription %r from %s: %s", prefix, src.name, exc)
                return
            if added and src.kind == "client":
                self._local_prefixes[prefix] += 1
                if self._local_prefixes[prefix] == 1:
                    self._forward(CTL_SUB, prefix)
        elif topic == CTL_UNSUB:
            if prefix in self.table.prefixes(src):
                self.table.remove(src, prefix)
                if src.kind == "client":
                    self._release_local(prefix)

    def _release_local(self, prefix: str) -> None:
        self._local_prefixes[prefix] -= 1
        if self._local_prefixes[prefix] <= 0:
            del self._local_prefixes[prefix]
            self._forward(CTL_UNSUB, prefix)

    def _forward(self, topic: str, prefix: str) -> None:
        data = encode_message(control_sample(topic, prefix))
        for link in list(self._peer_links.values()):
            self._send(link, data)

    # introspection (thread-safe snapshots) -------------------------------
    def call(self, fn, timeout: float = 2.0):
        """Run ``fn()`` on the routing loop and return its result."""
        fut = asyncio.run_coroutine_threadsafe(_wrap(fn), self._loop)
        return fut.result(timeout)

    def peer_hosts(self) -> set[str]:
        return self.call(lambda: set(self._peer_links))

    def subscriptions(self) -> set[tuple[str, str]]:
        return self.call(lambda: {(ep.name, p) for ep, p in self.table.entries})


async def _wrap(fn):
    return fn()


def _nodelay(writer) -> None:
    sock = writer.get_extra_info("socket")
    if sock is not None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionError("connection closed")
        got += k
    return bytes(buf)


class BrokerClient:
    """Blocking connection from a node to its host broker.

    Received samples go to ``on_message`` when given (called on the reader
    thread) or to an internal queue read with :meth:`recv`.  With
    ``reconnect=True`` a lost connection is redialed in the background with
    exponential backoff (10 ms up to 1 s); ``publish`` returns False meanwhile
    instead of blocking, and subscriptions are restored on reconnect.
    """

    def __init__(
        self,
        address,
        name: str = "client",
        on_message=None,
        reconnect: bool = False,
        connect_timeout: float = 1.0,
        backoff: tuple[float, float] = (0.01, 1.0),
    ) -> None:
        self.address = parse_endpoint(address)
        self.name = name
        self.on_message = on_message
        self.reconnect = reconnect
        self.connect_timeout = connect_timeout
        self.backoff = backoff
        self.inbox: queue.Queue = queue.Queue()
        self._sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._subs: list[str] = []
        self._closed = False
        self._pongs: queue.Queue = queue.Queue()
        self._retry_thread: threading.Thread | None = None
        self.published = 0
        self.failed_publishes = 0
        self.received = 0
        self.bad_messages = 0
        self.reconnects = 0

    @property
    def connected(self) -> bool:
        return self._sock is not None

    def connect(self) -> BrokerClient:
        try:
            self._open()
        except OSError as exc:
            if not self.reconnect:
                raise BrokerUnreachable(f"{self.name}: cannot reach broker at {self.address}: {exc}") from exc
            self._schedule_retry()
        return self

    def _open(self) -> None:
        sock = socket.create_connection(self.address, timeout=self.connect_timeout)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        with self._send_lock:
            for prefix in self._subs:
                sock.sendall(encode_message(control_sample(CTL_SUB, prefix)))
            self._sock = sock
        threading.Thread(target=self._reader, args=(sock,), name=f"{self.name}-rx", daemon=True).start()

    def _reader(self, sock: socket.socket) -> None:
        try:
            while True:
                frames = []
                for _ in range(3):
                    (n,) = _LEN.unpack(_recv_exact(sock, 4))
                    frames.append(_recv_exact(sock, n))
                try:
                    sample = decode_message(frames)
                except WireError:
                    self.bad_messages += 1
                    continue
                self.received += 1
                if sample.topic == CTL_PONG:
                    self._pongs.put(bytes(sample.payload))
                elif self.on_message is not None:
                    self.on_message(sample)
                else:
                    self.inbox.put(sample)
        except (ConnectionError, OSError):
            pass
        self._lost(sock)

    def _lost(self, sock: socket.socket) -> None:
        with self._send_lock:
            if self._sock is not sock:
                return
            self._sock = None
        try:
            sock.close()
        except OSError:
            pass
        if self.reconnect and not self._closed:
            self._schedule_retry()

    def _schedule_retry(self) -> None:
        if self._retry_thread is not None and self._retry_thread.is_alive():
            return
        self._retry_thread = threading.Thread(target=self._retry, name=f"{self.name}-redial", daemon=True)
        self._retry_thread.start()

    def _retry(self) -> None:
        delay, cap = self.backoff
        while not self._closed and self._sock is None:
            time.sleep(delay)
            try:
                self._open()
                self.reconnects += 1
                log.info("%s reconnected to %s", self.name, self.address)
                return
            except OSError:
                delay = min(delay * 2, cap)

    def _send(self, data: bytes) -> bool:
        with self._send_lock:
            sock = self._sock
            if sock is None:
                if self.reconnect:
                    return False
                raise BrokerUnreachable(f"{self.name}: not connected")
            try:
                sock.sendall(data)
                return True
            except OSError as exc:
                self._sock = None
                err = exc
        try:
            sock.close()
        except OSError:
            pass
        if self.reconnect and not self._closed:
            self._schedule_retry()
            return False
        raise BrokerUnreachable(f"{self.name}: send failed: {err}") from err

    def publish(self, sample: Sample) -> bool:
        ok = self._send(encode_message(sample))
        if ok:
            self.published += 1
        else:
            self.failed_publishes += 1
        return ok

    def publish_raw(self, data: bytes) -> bool:
        return self._send(data)

    def subscribe(self, prefix: str) -> None:
        if prefix not in self._subs:
            self._subs.append(prefix)
        self._send(encode_message(control_sample(CTL_SUB, prefix)))

    def unsubscribe(self, prefix: str) -> None:
        if prefix in self._subs:
            self._subs.remove(prefix)
        self._send(encode_message(control_sample(CTL_UNSUB, prefix)))

    def ping(self, timeout: float = 2.0) -> bool:
        """Round-trip through the broker; everything sent before is then processed."""
        token = f"{time.monotonic_ns()}"
        if not self._send(encode_message(control_sample(CTL_PING, token))):
            return False
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return False
            try:
                if self._pongs.get(timeout=remaining).decode() == token:
                    return True
            except queue.Empty:
                return False

    def recv(self, timeout: float | None = None) -> Sample | None:
        try:
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._closed = True
        with self._send_lock:
            sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()

    def __enter__(self) -> BrokerClient:
        return self.connect()

    def __exit__(self, *exc) -> None:
        self.close()
