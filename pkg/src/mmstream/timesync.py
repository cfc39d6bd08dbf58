"""Clock offset discipline, sensor propagation delay and the skew budget.

Sign convention: ``offset`` is always the correction that maps a host's raw
clock onto the reference clock (``reference ~= raw + offset``).  It is what
the four-timestamp exchange measures when the reference answers the request,
and pairwise skew is the absolute difference of two hosts' offsets.
"""

from __future__ import annotations

import logging
import threading
import time
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .errors import EmptyInput, NegativeDelay

log = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
DEFAULT_STEP_THRESHOLD_NS = 100_000_000  # 100 ms
DEFAULT_SLEW_RATE_PPM = 500.0  # 0.5 ms per second
DEFAULT_RESYNC_PERIOD_NS = 10 * NS_PER_S
MAX_DRIFT_PPM = 500.0
HISTORY = 8


class ClockUnderflow(UserWarning):
    """Arrival time earlier than the delay estimate; generation time clamped to 0."""


def estimate_offset(t1: int, t2: int, t3: int, t4: int) -> tuple[int, int]:
    """Offset and roundtrip delay from one request/reply exchange.

    t1 request sent (client clock), t2 request received (server clock),
    t3 reply sent (server clock), t4 reply received (client clock).
    """
    delay = (t4 - t1) - (t3 - t2)
    if t4 < t1 or t3 < t2 or delay < 0:
        raise NegativeDelay(f"exchange ({t1}, {t2}, {t3}, {t4}) implies delay {delay}")
    offset = ((t2 - t1) + (t3 - t4)) // 2
    return offset, delay


@dataclass(frozen=True)
class ClockModel:
    """Offset/delay/drift state for one host relative to the reference.

    ``offset_ns`` is the correction applied at ``last_update_ns``; between
    updates the applied correction slews toward ``target_offset_ns`` at no more
    than ``slew_rate_ppm`` and follows the drift estimate.
    """

    offset_ns: int = 0
    delay_ns: int = 0
    drift_ppm: float = 0.0
    last_update_ns: int = 0
    target_offset_ns: int = 0
    slew_rate_ppm: float = DEFAULT_SLEW_RATE_PPM
    steps: int = 0
    updates: int = 0
    history: tuple[tuple[int, int], ...] = field(default=(), repr=False)

    def offset_at(self, t_ns: int) -> int:
        if self.updates == 0:
            return self.offset_ns
        dt = max(0, t_ns - self.last_update_ns)
        budget = self.slew_rate_ppm * 1e-6 * dt
        remaining = self.target_offset_ns - self.offset_ns
        slewed = max(-budget, min(budget, remaining))
        return int(round(self.offset_ns + slewed + self.drift_ppm * 1e-6 * dt))

    def to_reference(self, raw_ns: int) -> int:
        return raw_ns + self.offset_at(raw_ns)

    def to_dict(self) -> dict:
        return {
            "offset_ns": self.offset_ns,
            "delay_ns": self.delay_ns,
            "drift_ppm": self.drift_ppm,
            "last_update_ns": self.last_update_ns,
            "target_offset_ns": self.target_offset_ns,
            "steps": self.steps,
            "updates": self.updates,
        }


def _fit_drift(history) -> float:
    if len(history) < 2:
        return 0.0
    t = np.array([h[0] for h in history], dtype=np.float64)
    y = np.array([h[1] for h in history], dtype=np.float64)
    if t[-1] - t[0] < NS_PER_S:
        return 0.0
    t -= t[0]
    slope = np.polyfit(t, y - y[0], 1)[0]
    return float(np.clip(slope * 1e6, -MAX_DRIFT_PPM, MAX_DRIFT_PPM))


def discipline(
    model: ClockModel,
    obs: tuple[int, int],
    now_ns: int,
    step_threshold_ns: int = DEFAULT_STEP_THRESHOLD_NS,
    slew_rate_ppm: float | None = None,
) -> ClockModel:
    """Fold one (offset, delay) observation taken at raw time ``now_ns`` into ``model``.

    Corrections smaller than ``step_threshold_ns`` are slewed so disciplined
    time stays monotone; larger ones are stepped and reset the drift history.
    """
    measured, delay = obs
    if delay < 0:
        raise NegativeDelay(f"delay {delay}")
    rate = model.slew_rate_ppm if slew_rate_ppm is None else slew_rate_ppm
    current = model.offset_at(now_ns)
    error = measured - current
    if abs(error) >= step_threshold_ns:
        log.info("clock step of %.3f ms", error / 1e6)
        return replace(
            model,
            offset_ns=measured,
            target_offset_ns=measured,
            delay_ns=delay,
            drift_ppm=0.0,
            last_update_ns=now_ns,
            slew_rate_ppm=rate,
            steps=model.steps + 1,
            updates=model.updates + 1,
            history=((now_ns, measured),),
        )
    history = (model.history + ((now_ns, measured),))[-HISTORY:]
    return replace(
        model,
        offset_ns=current,
        target_offset_ns=measured,
        delay_ns=delay,
        drift_ppm=_fit_drift(history),
        last_update_ns=now_ns,
        slew_rate_ppm=rate,
        updates=model.updates + 1,
        history=history,
    )


@dataclass(frozen=True)
class SensorDelayEstimate:
    d_hat_ns: int
    n_samples: int
    method: str = "min-roundtrip/2"


def estimate_sensor_delay(roundtrips) -> SensorDelayEstimate:
    """One-way delay as half the smallest roundtrip (queueing only adds delay)."""
    rts = [int(r) for r in roundtrips]
    if not rts:
        raise EmptyInput("no roundtrip measurements")
    if min(rts) < 0:
        raise NegativeDelay(f"negative roundtrip {min(rts)}")
    return SensorDelayEstimate(min(rts) // 2, len(rts))


def to_generation_time(toa_ns: int, est: SensorDelayEstimate | int) -> int:
    d_hat = est.d_hat_ns if isinstance(est, SensorDelayEstimate) else int(est)
    if toa_ns < d_hat:
        warnings.warn(f"toa {toa_ns} < d_hat {d_hat}; clamped to 0", ClockUnderflow, stacklevel=2)
        return 0
    return toa_ns - d_hat


@dataclass(frozen=True)
class SkewBudget:
    t_sample_ns: int

    @property
    def tolerance_ns(self) -> int:
        return self.t_sample_ns // 2

    @classmethod
    def from_rate(cls, highest_rate_hz) -> SkewBudget:
        return cls(round(Fraction(NS_PER_S) / Fraction(str(highest_rate_hz))))


@dataclass
class SkewReport:
    ok: bool
    tolerance_ns: int
    max_skew_ns: int
    violations: list[tuple[int, int, int]]

    def __bool__(self) -> bool:
        return self.ok


def check_skew(models, budget: SkewBudget, at_ns: int | None = None) -> SkewReport:
    """Compare every pair of hosts' offsets against half the fastest sample period."""
    models = list(models)
    if len(models) < 2:
        raise ValueError("need at least two clock models")
    offs = [m.offset_at(at_ns) if at_ns is not None else m.offset_ns for m in models]
    violations = []
    worst = 0
    for i in range(len(offs)):
        for j in range(i + 1, len(offs)):
            skew = abs(offs[i] - offs[j])
            worst = max(worst, skew)
            if skew > budget.tolerance_ns:
                violations.append((i, j, skew))
    return SkewReport(not violations, budget.tolerance_ns, worst, violations)


class HostClock:
    """Wall clock of one host, optionally offset and drifting (for simulation on one machine)."""

    def __init__(self, offset_ns: int = 0, drift_ppm: float = 0.0, source=time.time_ns):
        self.offset_ns = offset_ns
        self.drift_ppm = drift_ppm
        self._source = source
        self._epoch = source()

    def now_ns(self) -> int:
        t = self._source()
        return t + self.offset_ns + int((t - self._epoch) * self.drift_ppm * 1e-6)


class DisciplinedClock:
    """Raw host clock plus the current ClockModel correction, never running backwards."""

    def __init__(self, raw: HostClock | None = None, model: ClockModel | None = None):
        self.raw = raw or HostClock()
        self.model = model or ClockModel()
        self._last = 0

    def now_ns(self) -> int:
        raw = self.raw.now_ns()
        t = raw + self.model.offset_at(raw)
        if t < self._last:
            t = self._last
        self._last = t
        return t


@dataclass
class DriftSimResult:
    times_ns: np.ndarray
    skew_ns: np.ndarray
    models: list[ClockModel]
    max_estimate_error_ns: int

    @property
    def max_abs_skew_ns(self) -> int:
        return int(np.max(np.abs(self.skew_ns))) if len(self.skew_ns) else 0


def simulate_drift(
    duration_ns: int,
    drift_ppm: float,
    resync_period_ns: int = DEFAULT_RESYNC_PERIOD_NS,
    initial_offset_ns: int = 0,
    one_way_delay_ns: tuple[int, int] = (1_000_000, 1_000_000),
    step_threshold_ns: int = DEFAULT_STEP_THRESHOLD_NS,
    sample_every_ns: int = 10_000_000,
    seed: int = 0,
    discipline_enabled: bool = True,
) -> DriftSimResult:
    """Reference host with a perfect clock, peer host whose raw clock drifts.

    Every ``resync_period_ns`` the peer runs one exchange over links whose
    one-way delays are drawn uniformly (independently per direction) from
    ``one_way_delay_ns``.  Returns the peer's disciplined-minus-true skew
    sampled every ``sample_every_ns``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = one_way_delay_ns

    def raw(true_ns: int) -> int:
        return true_ns + initial_offset_ns + int(round(true_ns * drift_ppm * 1e-6))

    model = ClockModel()
    models = [model]
    times = np.arange(0, duration_ns + 1, sample_every_ns, dtype=np.int64)
    skew = np.empty(len(times), dtype=np.int64)
    next_sync = 0
    worst_err = 0
    for idx, t in enumerate(times):
        t = int(t)
        while discipline_enabled and next_sync <= t:
            up, down = (int(x) for x in rng.integers(lo, hi + 1, size=2))
            t1 = raw(next_sync)
            t2 = next_sync + up
            t3 = t2 + 20_000
            t4 = raw(t3 + down)
            off, dly = estimate_offset(t1, t2, t3, t4)
            worst_err = max(worst_err, abs(up - down) // 2 + 1)
            model = discipline(model, (off, dly), t4, step_threshold_ns=step_threshold_ns)
            models.append(model)
            next_sync += resync_period_ns
        r = raw(t)
        skew[idx] = r + model.offset_at(r) - t
    return DriftSimResult(times, skew, models, worst_err)


# network exchange over the broker

SYNC_REQ = "__sync/req"
SYNC_REP = "__sync/rep"


def _stamps(sample) -> list[int]:
    return np.frombuffer(sample.payload, dtype="<u8").tolist()


def _stamp_sample(topic: str, seq: int, stamps, toa_ns: int):
    from .wire import DType, Sample

    return Sample(topic, seq, toa_ns, 0, DType.U64, (4,), np.asarray(stamps, dtype="<u8").tobytes())


class SyncServer:
    """Answers sync requests with the reference host's receive and send times."""

    def __init__(self, broker_address, clock=None, name: str = "sync-server") -> None:
        from .broker import BrokerClient

        self.clock = clock or HostClock()
        self.client = BrokerClient(broker_address, name=name, on_message=self._on_request, reconnect=True)
        self.answered = 0

    def start(self) -> SyncServer:
        self.client.connect()
        self.client.subscribe(SYNC_REQ)
        self.client.ping()
        return self

    def _on_request(self, sample) -> None:
        t2 = self.clock.now_ns()
        host = sample.topic[len(SYNC_REQ) + 1 :]
        t1 = _stamps(sample)[0]
        t3 = self.clock.now_ns()
        self.client.publish(_stamp_sample(f"{SYNC_REP}/{host}", sample.seq, (t1, t2, t3, 0), t3))
        self.answered += 1

    def close(self) -> None:
        self.client.close()


class SyncAgent:
    """Periodically disciplines a host clock against the reference host.

    Each resync sends ``probes`` requests and keeps the exchange with the
    smallest roundtrip, the one least disturbed by queueing.  The current
    model is swapped in whole, so readers never see a half-updated one.
    """

    def __init__(
        self,
        host_id: str,
        broker_address,
        clock: DisciplinedClock,
        resync_period_ns: int = DEFAULT_RESYNC_PERIOD_NS,
        step_threshold_ns: int = DEFAULT_STEP_THRESHOLD_NS,
        slew_rate_ppm: float = DEFAULT_SLEW_RATE_PPM,
        probes: int = 4,
        timeout_s: float = 0.5,
    ) -> None:
        from .broker import BrokerClient

        self.host_id = host_id
        self.clock = clock
        self.resync_period_ns = resync_period_ns
        self.step_threshold_ns = step_threshold_ns
        self.slew_rate_ppm = slew_rate_ppm
        self.probes = probes
        self.timeout_s = timeout_s
        self.client = BrokerClient(broker_address, name=f"sync-agent:{host_id}", reconnect=True)
        self.history: list[ClockModel] = []
        self.failures = 0
        self.synced = threading.Event()
        self._seq = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def model(self) -> ClockModel:
        return self.clock.model

    def _exchange(self) -> tuple[int, int, int] | None:
        self._seq += 1
        seq = self._seq
        raw = self.clock.raw
        t1 = raw.now_ns()
        if not self.client.publish(_stamp_sample(f"{SYNC_REQ}/{self.host_id}", seq, (t1, 0, 0, 0), t1)):
            return None
        deadline = time.monotonic() + self.timeout_s
        while (remaining := deadline - time.monotonic()) > 0:
            reply = self.client.recv(remaining)
            if reply is None:
                break
            t4 = raw.now_ns()
            if reply.seq != seq:
                continue
            r1, t2, t3, _ = _stamps(reply)
            try:
                off, delay = estimate_offset(r1, t2, t3, t4)
            except NegativeDelay:
                return None
            return off, delay, t4
        return None

    def sync_once(self) -> ClockModel | None:
        results = [r for r in (self._exchange() for _ in range(self.probes)) if r is not None]
        if not results:
            self.failures += 1
            return None
        off, delay, t4 = min(results, key=lambda r: r[1])
        model = discipline(self.clock.model, (off, delay), t4, self.step_threshold_ns, self.slew_rate_ppm)
        self.clock.model = model
        self.history.append(model)
        return model

    def _run(self) -> None:
        while not self._stop.is_set():
            model = None
            try:
                model = self.sync_once()
            except Exception:
                self.failures += 1
                log.exception("sync exchange failed")
            if model is not None:
                self.synced.set()
            # until the reference answers, retry every second instead of every period
            wait = self.resync_period_ns / NS_PER_S if model is not None else min(1.0, self.resync_period_ns / NS_PER_S)
            self._stop.wait(wait)

    def start(self) -> SyncAgent:
        self.client.connect()
        self.client.subscribe(f"{SYNC_REP}/{self.host_id}")
        self.client.ping()
        self._thread = threading.Thread(target=self._run, name=f"sync:{self.host_id}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self.client.close()
