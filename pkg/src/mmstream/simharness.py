"""Seeded sensor/network simulation, missingness profiling and loopback benches."""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .node import DeviceAdapter, Reading
from .stream_store import StreamFifo
from .wire import Sample

NS_PER_S = 1_000_000_000
CHUNK = 8192


@dataclass
class SimSourceSpec:
    """One simulated modality.

    Jitter bounds are in nanoseconds and added on top of ``delay_ns``; a
    ``normal`` jitter uses ``jitter_sigma_ns`` clipped to the bounds.  Outages
    are either random (``outage_rate_hz`` with a uniform duration range) or
    injected as ``(start_s, duration_s)`` pairs; samples generated inside an
    outage are dropped.  In burst mode ``samples_per_burst`` readings spread
    evenly over each ``burst_period_s`` all arrive together at the end of it.
    """

    nominal_rate_hz: float
    payload_bytes: int = 64
    delay_ns: int = 0
    jitter: str = "none"
    jitter_low_ns: int = 0
    jitter_high_ns: int = 0
    jitter_sigma_ns: int = 0
    drop_p: float = 0.0
    outage_rate_hz: float = 0.0
    outage_min_s: float = 0.0
    outage_max_s: float = 0.0
    outages: list[tuple[float, float]] = field(default_factory=list)
    drift_ppm: float = 0.0
    samples_per_burst: int = 1
    burst_period_s: float | None = None

    def __post_init__(self) -> None:
        if self.nominal_rate_hz < 0:
            raise ValueError("nominal_rate_hz must be >= 0")
        if not 0.0 <= self.drop_p <= 1.0:
            raise ValueError("drop_p must lie in [0, 1]")
        if self.jitter not in ("none", "uniform", "normal"):
            raise ValueError(f"unknown jitter model {self.jitter!r}")
        if self.jitter_low_ns > self.jitter_high_ns:
            raise ValueError("jitter_low_ns > jitter_high_ns")
        if self.payload_bytes < 8:
            raise ValueError("payload_bytes must be >= 8 to carry the sequence number")
        self.outages = [tuple(o) for o in self.outages]
        if self.burst_period_s is not None:
            rate = self.samples_per_burst / self.burst_period_s
            if not math.isclose(rate, self.nominal_rate_hz, rel_tol=1e-9):
                raise ValueError(
                    f"burst mode needs rate = samples_per_burst / burst_period ({rate} != {self.nominal_rate_hz})"
                )

    @property
    def burst(self) -> bool:
        return self.burst_period_s is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outages"] = [list(o) for o in self.outages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimSourceSpec:
        return cls(**d)


@dataclass
class ScheduleChunk:
    seq: np.ndarray
    generation_ns: np.ndarray
    arrival_ns: np.ndarray  # -1 where dropped
    dropped: np.ndarray

    def __len__(self) -> int:
        return len(self.seq)


class ScheduleStream:
    """Endless, chunked event generator; chunk ``i`` depends only on (seed, i) and carried outage state."""

    def __init__(self, spec: SimSourceSpec, seed: int = 0) -> None:
        self.spec = spec
        self.seed = seed
        self._chunk = 0
        self._outage_until = 0
        self._next_outage: int | None = None

    def _rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, self._chunk, stream]))

    def _generation(self, k: np.ndarray) -> np.ndarray:
        spec = self.spec
        scale = 1.0 + spec.drift_ppm * 1e-6
        if spec.burst:
            n = spec.samples_per_burst
            base = (k // n) * spec.burst_period_s + (k % n) * (spec.burst_period_s / n)
        else:
            base = k / spec.nominal_rate_hz
        return np.round(base * NS_PER_S * scale).astype(np.int64)

    def _jitter(self, rng: np.random.Generator, n: int) -> np.ndarray:
        spec = self.spec
        if spec.jitter == "uniform":
            return rng.integers(spec.jitter_low_ns, spec.jitter_high_ns, size=n, endpoint=True)
        if spec.jitter == "normal":
            j = np.round(rng.normal(0.0, spec.jitter_sigma_ns, size=n)).astype(np.int64)
            return np.clip(j, spec.jitter_low_ns, spec.jitter_high_ns)
        return np.zeros(n, dtype=np.int64)

    def _outage_mask(self, gen: np.ndarray) -> np.ndarray:
        spec = self.spec
        mask = np.zeros(len(gen), dtype=bool)
        for start_s, dur_s in spec.outages:
            lo, hi = round(start_s * NS_PER_S), round((start_s + dur_s) * NS_PER_S)
            mask |= (gen >= lo) & (gen < hi)
        if spec.outage_rate_hz > 0 and len(gen):
            rng = self._rng(2)
            end = int(gen[-1])
            if self._next_outage is None:
                self._next_outage = int(gen[0] + rng.exponential(1.0 / spec.outage_rate_hz) * NS_PER_S)
            # outages keep their state across chunks so the process is seamless
            if self._outage_until > gen[0]:
                mask |= gen < self._outage_until
            while self._next_outage <= end:
                dur = rng.uniform(spec.outage_min_s, spec.outage_max_s)
                lo = self._next_outage
                hi = lo + round(dur * NS_PER_S)
                mask |= (gen >= lo) & (gen < hi)
                self._outage_until = max(self._outage_until, hi)
                self._next_outage = hi + int(rng.exponential(1.0 / spec.outage_rate_hz) * NS_PER_S)
        return mask

    def next_chunk(self) -> ScheduleChunk:
        spec = self.spec
        k = np.arange(self._chunk * CHUNK, (self._chunk + 1) * CHUNK, dtype=np.int64)
        gen = self._generation(k)
        rng = self._rng(1)
        dropped = rng.random(CHUNK) < spec.drop_p if spec.drop_p > 0 else np.zeros(CHUNK, dtype=bool)
        dropped |= self._outage_mask(gen)
        jitter = self._jitter(rng, CHUNK)
        if spec.burst:
            n = spec.samples_per_burst
            burst_end = self._generation((k // n + 1) * n)
            # one jitter draw per burst: the whole burst travels together
            jitter = jitter[(k // n) - (k[0] // n)] if len(k) else jitter
            arrival = burst_end + spec.delay_ns + jitter
        else:
            arrival = gen + spec.delay_ns + jitter
        arrival = np.maximum(arrival, gen)
        arrival = np.where(dropped, -1, arrival)
        self._chunk += 1
        return ScheduleChunk(k, gen, arrival, dropped)

    def __iter__(self) -> Iterator[ScheduleChunk]:
        while True:
            yield self.next_chunk()


def generate_schedule(spec: SimSourceSpec, duration_s: float, seed: int = 0) -> ScheduleChunk:
    """All events whose generation time falls in ``[0, duration)``."""
    if duration_s <= 0:
        raise ValueError("duration must be > 0")
    if spec.nominal_rate_hz == 0:
        empty = np.zeros(0, dtype=np.int64)
        return ScheduleChunk(empty, empty, empty, np.zeros(0, dtype=bool))
    limit = round(duration_s * NS_PER_S)
    parts = []
    for chunk in ScheduleStream(spec, seed):
        keep = chunk.generation_ns < limit
        parts.append(ScheduleChunk(*(a[keep] for a in (chunk.seq, chunk.generation_ns, chunk.arrival_ns, chunk.dropped))))
        if not keep.all():
            break
    return ScheduleChunk(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("seq", "generation_ns", "arrival_ns", "dropped")))


def save_schedule(schedule: ScheduleChunk, path: str | Path, spec: SimSourceSpec | None = None) -> None:
    """JSON-lines: an optional header line holding the SimSourceSpec, then one event per line."""
    with open(path, "w", encoding="utf-8") as fh:
        if spec is not None:
            fh.write(json.dumps({"spec": spec.to_dict()}, sort_keys=True) + "\n")
        for s, g, a, d in zip(schedule.seq.tolist(), schedule.generation_ns.tolist(),
                              schedule.arrival_ns.tolist(), schedule.dropped.tolist()):
            fh.write(json.dumps({"seq": s, "gen": g, "arr": None if d else a, "dropped": d}) + "\n")


def load_schedule(path: str | Path) -> tuple[ScheduleChunk, SimSourceSpec | None]:
    spec = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if "spec" in rec:
                spec = SimSourceSpec.from_dict(rec["spec"])
                continue
            rows.append((rec["seq"], rec["gen"], -1 if rec["arr"] is None else rec["arr"], rec["dropped"]))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return ScheduleChunk(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3].astype(bool)), spec


def patterned_payload(seq: int, nbytes: int) -> np.ndarray:
    """u8 payload whose first 8 bytes hold ``seq`` (little endian); the rest is a seq-dependent ramp."""
    out = ((np.arange(nbytes, dtype=np.uint32) + seq) & 0xFF).astype(np.uint8)
    out[:8] = np.frombuffer(int(seq).to_bytes(8, "little"), dtype=np.uint8)
    return out


def payload_seq(payload) -> int:
    return int.from_bytes(bytes(payload[:8]), "little")


class SimDeviceAdapter(DeviceAdapter):
    """Replays a schedule in real time (optionally sped up) as a device would deliver it."""

    def __init__(self, topic: str, spec: SimSourceSpec, seed: int = 0, speedup: float = 1.0,
                 monotonic=time.monotonic_ns) -> None:
        if speedup <= 0:
            raise ValueError("speedup must be > 0")
        self.topic = topic
        self.spec = spec
        self.speedup = speedup
        self._mono = monotonic
        self._stream = ScheduleStream(spec, seed)
        self._pending: list[tuple[int, int]] = []  # (arrival_ns, seq), sorted by arrival
        self._cursor = 0
        self._horizon = -1
        self._t0: int | None = None
        self.yielded = 0
        self.dropped = 0
        self._rt_rng = np.random.default_rng(seed + 7919)

    def start(self) -> None:
        if self._t0 is None:
            self._t0 = self._mono()

    def sim_now_ns(self) -> int:
        self.start()
        return int((self._mono() - self._t0) * self.speedup)

    def _refill(self, upto: int) -> None:
        while self._horizon < upto and self.spec.nominal_rate_hz > 0:
            c = self._stream.next_chunk()
            self.dropped += int(c.dropped.sum())
            live = ~c.dropped
            fresh = list(zip(c.arrival_ns[live].tolist(), c.seq[live].tolist()))
            rest = self._pending[self._cursor :] + fresh
            rest.sort()
            self._pending, self._cursor = rest, 0
            self._horizon = int(c.generation_ns[-1])

    def poll(self) -> list[Reading]:
        now = self.sim_now_ns()
        self._refill(now + self.spec.delay_ns + max(self.spec.jitter_high_ns, 0) + NS_PER_S)
        out = []
        p, i = self._pending, self._cursor
        while i < len(p) and p[i][0] <= now:
            out.append(Reading(self.topic, patterned_payload(p[i][1], self.spec.payload_bytes)))
            i += 1
        self._cursor = i
        self.yielded += len(out)
        return out

    def measure_roundtrip(self) -> int | None:
        base = 2 * (self.spec.delay_ns + (self.spec.jitter_low_ns if self.spec.jitter != "none" else 0))
        extra = int(self._rt_rng.integers(0, max(1, self.spec.jitter_high_ns - self.spec.jitter_low_ns) + 1))
        return max(0, base + extra)


# missingness


PARTS = (("pph", 100.0), ("ppt", 1e3), ("ppm", 1e6))


def parts_per(ratio: float) -> tuple[float, str]:
    """Coarsest unit whose mantissa is >= 1 (so it stays below 1000); ppm as the floor."""
    if ratio <= 0:
        return 0.0, "ppm"
    for unit, scale in PARTS:
        if ratio * scale >= 1.0:
            return ratio * scale, unit
    return ratio * 1e6, "ppm"


@dataclass
class MissingnessProfile:
    nominal_rate_hz: float
    received: int
    missing: int
    gap_lengths: np.ndarray
    histogram: list[dict]
    modality: str = ""

    @property
    def expected(self) -> int:
        return self.received + self.missing

    @property
    def ratio(self) -> float:
        return self.missing / self.expected if self.expected else 0.0

    @property
    def parts_per(self) -> tuple[float, str]:
        return parts_per(self.ratio)

    @property
    def longest_gap(self) -> int:
        return int(self.gap_lengths.max()) if len(self.gap_lengths) else 0

    @property
    def n_gaps(self) -> int:
        return len(self.gap_lengths)

    def to_dict(self) -> dict:
        value, unit = self.parts_per
        return {
            "modality": self.modality,
            "nominal_rate_hz": self.nominal_rate_hz,
            "received": self.received,
            "missing": self.missing,
            "expected": self.expected,
            "ratio": self.ratio,
            "parts_per": value,
            "parts_per_unit": unit,
            "parts_per_text": f"{value:.3g} {unit}",
            "n_gaps": self.n_gaps,
            "longest_gap": self.longest_gap,
            "longest_gap_s": self.longest_gap / self.nominal_rate_hz if self.nominal_rate_hz else 0.0,
            "histogram": self.histogram,
        }


def _histogram(gaps: np.ndarray, rate_hz: float) -> list[dict]:
    if not len(gaps):
        return []
    top = int(math.ceil(math.log2(int(gaps.max()) + 1)))
    edges = [1 << i for i in range(top + 1)]
    counts, _ = np.histogram(gaps, bins=edges)
    return [
        {
            "lo_samples": lo,
            "hi_samples": hi,
            "lo_s": lo / rate_hz,
            "hi_s": hi / rate_hz,
            "count": int(c),
        }
        for lo, hi, c in zip(edges[:-1], edges[1:], counts)
    ]


def profile_missingness(times_ns=None, nominal_rate_hz: float = 0.0, seqs=None,
                        tolerance: float = 1.5, modality: str = "") -> MissingnessProfile:
    """Gaps from sequence numbers when given, else from inter-sample times.

    A time difference above ``tolerance`` nominal periods counts as
    ``round(dt / period) - 1`` missing samples.
    """
    if seqs is not None:
        s = np.asarray(seqs, dtype=np.int64)
        d = np.diff(s) - 1
        gaps = d[d > 0]
        received = len(s)
    else:
        t = np.asarray(times_ns if times_ns is not None else [], dtype=np.int64)
        received = len(t)
        if nominal_rate_hz <= 0 or received < 2:
            gaps = np.zeros(0, dtype=np.int64)
        else:
            period = NS_PER_S / nominal_rate_hz
            dt = np.diff(t)
            big = dt[dt > tolerance * period]
            gaps = np.rint(big / period).astype(np.int64) - 1
            gaps = gaps[gaps > 0]
    gaps = gaps.astype(np.int64)
    return MissingnessProfile(
        nominal_rate_hz, received, int(gaps.sum()), gaps,
        _histogram(gaps, nominal_rate_hz or 1.0), modality,
    )


def profile_schedule(schedule: ScheduleChunk, nominal_rate_hz: float, modality: str = "") -> MissingnessProfile:
    keep = ~schedule.dropped
    return profile_missingness(schedule.generation_ns[keep], nominal_rate_hz, modality=modality)


# sawtooth


@dataclass
class SawtoothResult:
    times_s: np.ndarray
    buffered_bytes: np.ndarray
    peak_bytes: int
    bound_bytes: int
    drain_backlog_bytes: int
    flushes: int

    @property
    def bounded(self) -> bool:
        return self.peak_bytes <= self.bound_bytes


def simulate_sawtooth(accum_bytes_per_s: float, drain_bytes_per_s: float, period_s: float,
                      duration_s: float, sample_bytes: int = 1 << 20, dt_s: float = 1e-3) -> SawtoothResult:
    """Accumulate-then-flush on a real StreamFifo under a virtual clock.

    Capture pushes ``accum`` bytes/s every step; each ``period`` the storage
    side starts a flush that drains ``drain`` bytes/s until the FIFO is empty.
    The bound is ``accum * period`` plus the largest amount accumulated while
    a single flush was still draining.
    """
    if drain_bytes_per_s <= accum_bytes_per_s:
        raise ValueError("drain must exceed accumulation for a bounded profile")
    fifo = StreamFifo()
    payload = bytes(sample_bytes)
    steps = int(round(duration_s / dt_s))
    times = np.arange(steps) * dt_s
    level = np.zeros(steps, dtype=np.int64)
    credit_in = credit_out = 0.0
    seq = 0
    next_flush = period_s
    draining = False
    flushes = 0
    backlog = max_backlog = 0
    for i in range(steps):
        t = (i + 1) * dt_s
        credit_in += accum_bytes_per_s * dt_s
        while credit_in >= sample_bytes:
            fifo.push_head(Sample("sim/load", seq, 0, 0, 1, (sample_bytes,), payload))
            seq += 1
            credit_in -= sample_bytes
            if draining:
                backlog += sample_bytes
        if not draining and t >= next_flush - 1e-12:
            draining = True
            flushes += 1
            next_flush += period_s
            credit_out = 0.0
            backlog = 0
        if draining:
            credit_out += drain_bytes_per_s * dt_s
            n = int(credit_out // sample_bytes)
            if n:
                got = fifo.drain_batch(n)
                credit_out -= len(got) * sample_bytes
            if len(fifo) == 0:
                draining = False
                max_backlog = max(max_backlog, backlog)
        level[i] = fifo.nbytes
    bound = int(accum_bytes_per_s * period_s) + max_backlog + sample_bytes
    return SawtoothResult(times, level, int(level.max()), bound, max_backlog, flushes)


# bench


@dataclass
class BenchCell:
    rate_hz: float
    size_bytes: int
    duration_s: float
    sent: int = 0
    delivered: int = 0
    dropped_by_policy: int = 0
    out_of_order: int = 0
    median_ms: float | None = None
    p99_ms: float | None = None
    mean_ms: float | None = None
    max_ms: float | None = None
    first_decile_median_ms: float | None = None
    last_decile_median_ms: float | None = None
    achieved_rate_hz: float | None = None

    @property
    def lost(self) -> int:
        return self.sent - self.delivered - self.dropped_by_policy

    @property
    def saturation_free(self) -> bool:
        if self.first_decile_median_ms is None:
            return True
        return self.last_decile_median_ms <= 3 * self.first_decile_median_ms + 1.0

    def row(self) -> dict:
        d = asdict(self)
        d["lost"] = self.lost
        d["saturation_free"] = self.saturation_free
        return d


BENCH_COLUMNS = list(BenchCell(0, 0, 0).row().keys())


def _summarize(cell: BenchCell, latencies_ns: list[int]) -> None:
    if not latencies_ns:
        return
    lat = np.asarray(latencies_ns, dtype=np.float64) / 1e6
    cell.median_ms = float(np.median(lat))
    cell.p99_ms = float(np.percentile(lat, 99))
    cell.mean_ms = float(lat.mean())
    cell.max_ms = float(lat.max())
    tenth = max(1, len(lat) // 10)
    cell.first_decile_median_ms = float(np.median(lat[:tenth]))
    cell.last_decile_median_ms = float(np.median(lat[-tenth:]))


def bench_cell(broker_address, rate_hz: float, size_bytes: int, duration_s: float,
               topic: str = "bench/data", drain_timeout_s: float = 5.0) -> BenchCell:
    """One producer and one subscriber through a running broker; payload carries seq and send time."""
    from .broker import BrokerClient

    cell = BenchCell(rate_hz, size_bytes, duration_s)
    if rate_hz <= 0 or duration_s <= 0:
        return cell
    size = max(int(size_bytes), 16)
    n = int(round(rate_hz * duration_s))
    latencies = [0] * n
    seen = bytearray(n)
    counts = {"delivered": 0, "ooo": 0, "last": -1}
    done = threading.Event()

    def on_message(sample: Sample) -> None:
        now = time.monotonic_ns()
        buf = sample.payload
        seq = int.from_bytes(buf[:8], "little")
        sent_at = int.from_bytes(buf[8:16], "little")
        if seq < n and not seen[seq]:
            seen[seq] = 1
            latencies[seq] = now - sent_at
            counts["delivered"] += 1
            if seq < counts["last"]:
                counts["ooo"] += 1
            counts["last"] = seq
            if counts["delivered"] == n:
                done.set()

    sub = BrokerClient(broker_address, name="bench-sub", on_message=on_message).connect()
    pub = BrokerClient(broker_address, name="bench-pub").connect()
    try:
        sub.subscribe(topic)
        sub.ping()
        pub.ping()
        body = bytearray(patterned_payload(0, size).tobytes())
        period = NS_PER_S / rate_hz
        t0 = time.monotonic_ns()
        for seq in range(n):
            due = t0 + int(seq * period)
            while (now := time.monotonic_ns()) < due:
                if due - now > 2_000_000:
                    time.sleep((due - now - 1_000_000) / 1e9)
            body[:8] = seq.to_bytes(8, "little")
            body[8:16] = time.monotonic_ns().to_bytes(8, "little")
            pub.publish(Sample(topic, seq, 0, 0, 1, (size,), bytes(body)))
            cell.sent += 1
        elapsed = (time.monotonic_ns() - t0) / 1e9
        cell.achieved_rate_hz = cell.sent / elapsed if elapsed > 0 else None
        done.wait(drain_timeout_s)
    finally:
        pub.close()
        sub.close()
    cell.delivered = counts["delivered"]
    cell.out_of_order = counts["ooo"]
    _summarize(cell, [latencies[i] for i in range(n) if seen[i]])
    return cell


def run_bench(rates, sizes, duration_s: float, broker_address=None, progress=None) -> list[BenchCell]:
    """Every (rate, size) cell against one loopback broker (started here unless given)."""
    from .broker import Broker

    own = None
    if broker_address is None:
        own = Broker("bench", listen="tcp://127.0.0.1:0").start()
        broker_address = own.endpoint
    cells = []
    try:
        for size in sizes:
            for rate in rates:
                cell = bench_cell(broker_address, rate, size, duration_s)
                cells.append(cell)
                if progress is not None:
                    progress(cell)
    finally:
        if own is not None:
            own.stop()
    return cells


def write_bench(cells: list[BenchCell], out_dir: str | Path) -> tuple[Path, Path]:
    import csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [c.row() for c in cells]
    csv_path, json_path = out / "bench.csv", out / "bench.json"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    json_path.write_text(json.dumps(rows, indent=2), encoding="utf-8")
    return csv_path, json_path


def latency_trend_ok(cells: list[BenchCell]) -> bool:
    """Saturation-free: within each cell the late-run latency did not run away from the early-run latency."""
    return all(c.saturation_free for c in cells if c.delivered)
