"""Periodic, crash-bounded persistence of stream FIFOs to HDF5, plus the video encoder sink.

Each topic lives in its own file ``<session>/<host>/<topic with / as _>.h5``
holding one group named after the topic with the aligned datasets ``seq``,
``time_of_arrival_ns``, ``time_of_generation_ns`` and the N-dimensional
``data``.  Files are opened, appended, synced and closed on every cycle, so a
process killed between cycles leaves every file readable and complete up to
the last finished flush.
"""

from __future__ import annotations

import errno
import fcntl
import json
import logging
import math
import os
import shlex
import subprocess
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import h5py
import numpy as np

from .errors import DiskFull, EncoderExited, SchemaMismatch
from .stream_store import StreamFifo
from .wire import DType, Sample

log = logging.getLogger(__name__)

LAYOUT_VERSION = 1
MAX_CHUNK_BYTES = 256 << 20
WAKEUP_MARGIN_NS = 20_000_000
TIME_FIELDS = ("seq", "time_of_arrival_ns", "time_of_generation_ns")


@dataclass
class FlushPolicy:
    period_ns: int
    out_dir: Path
    layout_version: int = LAYOUT_VERSION
    max_batch: int | None = None

    def __post_init__(self) -> None:
        if self.period_ns <= 0:
            raise ValueError("flush period must be > 0")
        self.out_dir = Path(self.out_dir)


def topic_filename(topic: str) -> str:
    return topic.replace("/", "_") + ".h5"


def _is_enospc(exc: BaseException) -> bool:
    return getattr(exc, "errno", None) == errno.ENOSPC or "No space left" in str(exc)


def _fsync_path(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class TopicDataset:
    """Append-only table of one topic; dtype and dims are fixed by the first batch."""

    def __init__(self, path: str | Path, topic: str) -> None:
        self.path = Path(path)
        self.topic = topic
        self.dtype: DType | None = None
        self.dims: tuple[int, ...] | None = None
        self.rows = 0
        self.last_seq: int | None = None
        if self.path.exists():
            with h5py.File(self.path, "r") as f:
                if topic in f:
                    g = f[topic]
                    self.dtype = DType.parse(g.attrs["dtype"])
                    self.dims = tuple(int(d) for d in g.attrs["dims"])
                    self.rows = g["seq"].shape[0]
                    if self.rows:
                        self.last_seq = int(g["seq"][-1])

    def check(self, batch: list[Sample]) -> None:
        dtype = self.dtype if self.dtype is not None else batch[0].dtype
        dims = self.dims if self.dims is not None else batch[0].dims
        prev = self.last_seq
        for s in batch:
            if s.topic != self.topic:
                raise SchemaMismatch(f"{s.topic} in dataset of {self.topic}")
            if s.dtype != dtype or s.dims != dims:
                raise SchemaMismatch(
                    f"{self.topic}: got {s.dtype.name}{list(s.dims)}, dataset holds {dtype.name}{list(dims)}"
                )
            if prev is not None and s.seq <= prev:
                raise SchemaMismatch(f"{self.topic}: seq {s.seq} does not follow {prev}")
            prev = s.seq

    def _create(self, f: h5py.File, first: Sample, n: int) -> h5py.Group:
        g = f.require_group(self.topic)
        row_bytes = max(1, first.nbytes)
        chunk = max(1, min(n, MAX_CHUNK_BYTES // row_bytes))
        for name in TIME_FIELDS:
            g.create_dataset(name, shape=(0,), maxshape=(None,), dtype="<u8", chunks=(chunk,))
        g.create_dataset(
            "data",
            shape=(0, *first.dims),
            # zero-length dims stay extensible so a chunk of 1 along them is legal
            maxshape=(None, *(d or None for d in first.dims)),
            dtype=first.dtype.numpy,
            chunks=(chunk, *(max(1, d) for d in first.dims)),
        )
        g.attrs["topic"] = self.topic
        g.attrs["dtype"] = first.dtype.name
        g.attrs["dims"] = np.asarray(first.dims, dtype="<u4")
        g.attrs["layout_version"] = LAYOUT_VERSION
        self.dtype, self.dims = first.dtype, first.dims
        return g

    def append(self, batch: list[Sample]) -> int:
        if not batch:
            return 0
        self.check(batch)
        n = len(batch)
        cols = {
            "seq": np.fromiter((s.seq for s in batch), dtype="<u8", count=n),
            "time_of_arrival_ns": np.fromiter((s.time_of_arrival_ns for s in batch), dtype="<u8", count=n),
            "time_of_generation_ns": np.fromiter((s.time_of_generation_ns for s in batch), dtype="<u8", count=n),
        }
        dt = batch[0].dtype.numpy
        data = np.empty((n, *batch[0].dims), dtype=dt)
        flat = data.reshape(n, -1)
        for i, s in enumerate(batch):
            flat[i] = np.frombuffer(s.payload, dtype=dt)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            with h5py.File(self.path, "a") as f:
                g = f[self.topic] if self.topic in f else self._create(f, batch[0], n)
                start = g["seq"].shape[0]
                for name, col in cols.items():
                    d = g[name]
                    d.resize(start + n, axis=0)
                    d[start:] = col
                d = g["data"]
                d.resize(start + n, axis=0)
                d[start:] = data
                f.flush()
            _fsync_path(self.path)
        except OSError as exc:
            if _is_enospc(exc):
                raise DiskFull(errno.ENOSPC, f"disk full writing {self.path}") from exc
            raise
        self.rows = start + n
        self.last_seq = batch[-1].seq
        return n


def write_chunk(dataset: TopicDataset, batch: list[Sample]) -> int:
    return dataset.append(batch)


def read_topic(path: str | Path, topic: str | None = None) -> list[Sample]:
    """Rows of one stored topic rebuilt as samples."""
    with h5py.File(path, "r") as f:
        if topic is None:
            topic = _first_topic(f)
        g = f[topic]
        dtype = DType.parse(g.attrs["dtype"])
        dims = tuple(int(d) for d in g.attrs["dims"])
        seq, toa, tog = (g[n][:] for n in TIME_FIELDS)
        data = g["data"][:]
    return [
        Sample(topic, int(seq[i]), int(toa[i]), int(tog[i]), dtype, dims, data[i].tobytes())
        for i in range(len(seq))
    ]


def _first_topic(f: h5py.File) -> str:
    found = []

    def visit(name, obj):
        if isinstance(obj, h5py.Group) and "topic" in obj.attrs:
            found.append(name)

    f.visititems(visit)
    if not found:
        raise KeyError("no topic group in file")
    return found[0]


def stored_rows(path: str | Path) -> dict[str, int]:
    """``{topic: rows}`` for every topic group in a file."""
    out = {}
    with h5py.File(path, "r") as f:

        def visit(name, obj):
            if isinstance(obj, h5py.Group) and "topic" in obj.attrs:
                out[str(obj.attrs["topic"])] = obj["seq"].shape[0]

        f.visititems(visit)
    return out


@dataclass
class FlushReport:
    rows: dict[str, int] = field(default_factory=dict)
    bytes: dict[str, int] = field(default_factory=dict)
    duration_ns: int = 0
    error: str | None = None

    @property
    def total_rows(self) -> int:
        return sum(self.rows.values())


class _Writer:
    """Dataset cache plus batches held back after a failed write."""

    def __init__(self, policy: FlushPolicy) -> None:
        self.policy = policy
        self.datasets: dict[str, TopicDataset] = {}
        self.held: dict[str, list[Sample]] = {}

    def dataset(self, topic: str) -> TopicDataset:
        ds = self.datasets.get(topic)
        if ds is None:
            ds = self.datasets[topic] = TopicDataset(self.policy.out_dir / topic_filename(topic), topic)
        return ds


def flush_cycle(fifos: Mapping[str, StreamFifo], policy: FlushPolicy, writer: _Writer | None = None) -> FlushReport:
    """Drain what each FIFO holds right now and append it durably.

    On a full disk the drained samples stay in memory (``writer.held``) and
    ``DiskFull`` propagates; the caller decides whether to keep flushing.
    """
    if writer is None:
        writer = _Writer(policy)
    t0 = time.monotonic_ns()
    report = FlushReport()
    for topic in sorted(fifos):
        fifo = fifos[topic]
        n = len(fifo)
        if policy.max_batch is not None:
            n = min(n, policy.max_batch)
        batch = writer.held.pop(topic, []) + (fifo.drain_batch(n) if n else [])
        if not batch:
            continue
        try:
            rows = writer.dataset(topic).append(batch)
        except (DiskFull, SchemaMismatch):
            writer.held[topic] = batch
            report.duration_ns = time.monotonic_ns() - t0
            raise
        report.rows[topic] = rows
        report.bytes[topic] = sum(s.nbytes for s in batch)
    report.duration_ns = time.monotonic_ns() - t0
    return report


def write_manifest(path: str | Path, manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str), encoding="utf-8")
    os.replace(tmp, path)
    _fsync_path(path)


class StorageAgent:
    """Sole tail reader of a host's FIFOs; flushes them on a period.

    Each cycle starts early by more than a flush takes, so the time between a
    sample's capture and its sync to disk stays within one period even though
    flushing is not instantaneous.
    """

    def __init__(self, policy: FlushPolicy, fifos: Callable[[], Mapping[str, StreamFifo]] | Mapping[str, StreamFifo],
                 manifest: dict | None = None, monotonic=time.monotonic_ns,
                 sinks: Mapping[str, FrameSink] | None = None) -> None:
        self.policy = policy
        self.sinks = dict(sinks or {})
        self._fifos = fifos if callable(fifos) else (lambda: fifos)
        self.writer = _Writer(policy)
        self.manifest = dict(manifest or {})
        self.stored: dict[str, int] = {}
        self.cycles = 0
        self.halted: str | None = None
        self.last_duration_ns = 0
        self.max_duration_ns = 0
        self._mono = monotonic
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self._recent: deque[int] = deque(maxlen=8)

    @property
    def manifest_path(self) -> Path:
        return self.policy.out_dir / "session.json"

    def write_manifest(self, **extra) -> None:
        self.manifest.update(extra)
        self.manifest.setdefault("layout_version", self.policy.layout_version)
        self.manifest["stored"] = dict(self.stored)
        write_manifest(self.manifest_path, self.manifest)

    def flush(self) -> FlushReport:
        with self._lock:
            if self.halted:
                return FlushReport(error=self.halted)
            fifos = self._fifos()
            tables = {t: f for t, f in fifos.items() if t not in self.sinks}
            try:
                report = flush_cycle(tables, self.policy, self.writer)
            except DiskFull as exc:
                self.halted = str(exc)
                log.error("storage halted: %s", exc)
                return FlushReport(error=self.halted)
            for topic, sink in self.sinks.items():
                fifo = fifos.get(topic)
                batch = fifo.drain_batch(len(fifo)) if fifo is not None and len(fifo) else []
                for sample in batch:
                    sink.write(sample.payload)
                if batch:
                    report.rows[topic] = len(batch)
                    report.bytes[topic] = sum(s.nbytes for s in batch)
            for topic, n in report.rows.items():
                self.stored[topic] = self.stored.get(topic, 0) + n
            self.cycles += 1
            self.last_duration_ns = report.duration_ns
            self.max_duration_ns = max(self.max_duration_ns, report.duration_ns)
            self._recent.append(report.duration_ns)
            return report

    def lead_ns(self) -> int:
        """How early the next cycle starts: twice the slowest recent flush plus a wakeup margin."""
        recent = max(self._recent, default=0)
        return min(2 * recent + WAKEUP_MARGIN_NS, self.policy.period_ns // 2)

    def _run(self) -> None:
        period = self.policy.period_ns
        start = self._mono()
        while True:
            lead = self.lead_ns()
            deadline = start + period - lead
            wait = (deadline - self._mono()) / 1e9
            if self._stop.wait(max(0.0, wait)):
                return
            start = self._mono()
            try:
                self.flush()
            except Exception:
                log.exception("flush cycle failed")

    def start(self) -> StorageAgent:
        self.policy.out_dir.mkdir(parents=True, exist_ok=True)
        for sink in self.sinks.values():
            if sink.proc is None:
                sink.start()
        self.write_manifest()
        self._thread = threading.Thread(target=self._run, name="storage", daemon=True)
        self._thread.start()
        return self

    def stop(self, final_flush: bool = True) -> None:
        """Stop the timer and, by default, flush until every FIFO is empty."""
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        if final_flush:
            while not self.halted:
                report = self.flush()
                if not report.total_rows and not self.writer.held:
                    break
        for sink in self.sinks.values():
            sink.close()
        self.write_manifest(stopped_ns=time.time_ns(), halted=self.halted)


# video path


def pipe_capacity(fileobj) -> int:
    try:
        return fcntl.fcntl(fileobj.fileno(), getattr(fcntl, "F_GETPIPE_SZ", 1032))
    except OSError:
        return 65536


class FrameSink:
    """Pipes raw frames into an external encoder process, one process per stream.

    If the encoder dies, frames are written to ``<topic>.raw`` instead.  The
    frames that may still have been sitting unread in the pipe are replayed
    into the fallback file first, so no captured frame goes missing (a few
    may end up in both outputs).
    """

    def __init__(self, topic: str, out_dir: str | Path, width: int, height: int, fps: float,
                 encoder_cmd: str, channels: int = 3, out_name: str | None = None) -> None:
        self.topic = topic
        self.out_dir = Path(out_dir)
        self.width, self.height, self.fps, self.channels = width, height, fps, channels
        self.frame_size = width * height * channels
        base = topic.replace("/", "_")
        self.out_path = self.out_dir / (out_name or f"{base}.mp4")
        self.fallback_path = self.out_dir / f"{base}.raw"
        self.encoder_cmd = encoder_cmd
        self.proc: subprocess.Popen | None = None
        self.frames_in = 0
        self.frames_piped = 0
        self.frames_fallback = 0
        self.frames_replayed = 0
        self.bytes_piped = 0
        self.failed = False
        self._recent: deque[bytes] = deque()
        self._fallback = None

    def command(self) -> list[str]:
        return shlex.split(
            self.encoder_cmd.format(width=self.width, height=self.height, fps=self.fps, out=str(self.out_path))
        )

    def start(self) -> FrameSink:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.proc = subprocess.Popen(self.command(), stdin=subprocess.PIPE, stdout=subprocess.DEVNULL,
                                     stderr=subprocess.DEVNULL)
        keep = math.ceil(pipe_capacity(self.proc.stdin) / max(1, self.frame_size)) + 1
        self._recent = deque(maxlen=keep)
        return self

    def _to_fallback(self, frame: bytes) -> None:
        if self._fallback is None:
            self._fallback = open(self.fallback_path, "ab")
        self._fallback.write(frame)
        self.frames_fallback += 1

    def _fail(self) -> None:
        self.failed = True
        log.error("encoder for %s exited; writing raw frames to %s", self.topic, self.fallback_path)
        for frame in self._recent:
            self._to_fallback(frame)
            self.frames_replayed += 1
        self._recent.clear()

    def write(self, frame) -> int:
        frame = bytes(frame)
        if len(frame) != self.frame_size:
            raise ValueError(f"frame of {len(frame)} bytes, expected {self.frame_size}")
        self.frames_in += 1
        if not self.failed:
            try:
                if self.proc is None or self.proc.poll() is not None:
                    raise BrokenPipeError
                self.proc.stdin.write(frame)
                self.proc.stdin.flush()
                self._recent.append(frame)
                self.frames_piped += 1
                self.bytes_piped += len(frame)
                return len(frame)
            except (BrokenPipeError, OSError, ValueError):
                self._fail()
        self._to_fallback(frame)
        return 0

    def pump(self, ring) -> int:
        """Move every frame currently held by a ``RingBuffer`` into the sink."""
        n = 0
        while (item := ring.get()) is not None:
            self.write(item[1])
            n += 1
        return n

    def close(self, timeout: float = 30.0) -> int:
        """Close the pipe, wait for the encoder and return its exit code."""
        code = 0
        if self.proc is not None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                code = self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                code = self.proc.wait()
            if code != 0 and not self.failed:
                # the encoder may have died after the last write without a broken pipe
                self._fail()
        if self._fallback is not None:
            self._fallback.flush()
            os.fsync(self._fallback.fileno())
            self._fallback.close()
            self._fallback = None
        return code

    @property
    def reconciled(self) -> bool:
        return self.frames_piped + self.frames_fallback - self.frames_replayed == self.frames_in

    def __enter__(self) -> FrameSink:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()


def frame_sink(frames, encoder_cmd: str, topic: str, out_dir, width: int, height: int, fps: float,
               channels: int = 3) -> int:
    """Pipe an iterable of frames through a fresh encoder; returns bytes piped."""
    with FrameSink(topic, out_dir, width, height, fps, encoder_cmd, channels) as sink:
        for frame in frames:
            sink.write(frame)
    if sink.failed:
        exc = EncoderExited(f"encoder for {topic} exited; {sink.frames_fallback} frames in {sink.fallback_path}")
        exc.sink = sink
        raise exc
    return sink.bytes_piped
