"""``mmstream`` command line: run a host, bench the broker, profile missingness, stop a session."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import signal
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, MMStreamError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
LOG_ENV = "MMSTREAM_LOG_LEVEL"

log = logging.getLogger("mmstream")

_UNITS = {"": 1, "k": 1_000, "m": 1_000_000, "ki": 1024, "mi": 1 << 20}


def parse_size(text: str) -> int:
    t = text.strip().lower().removesuffix("b")
    num = t.rstrip("kmi")
    unit = t[len(num):]
    try:
        return int(float(num) * _UNITS[unit])
    except (KeyError, ValueError):
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None


def parse_list(conv):
    def parse(text: str):
        try:
            return [conv(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def cmd_run(args) -> int:
    from .config import load_config
    from .host import HostRuntime

    cfg = load_config(args.config)
    runtime = HostRuntime(cfg, args.host, output_dir=args.output)

    def on_signal(signum, _frame):
        log.info("signal %d: shutting down", signum)
        runtime.shutdown_requested.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    try:
        runtime.start()
        runtime.wait(args.duration)
    finally:
        report = runtime.shutdown() if runtime.broker is not None else None
    if report is not None:
        print(json.dumps({k: report[k] for k in ("host", "captured", "stored", "reconciled")}, sort_keys=True))
    if report is None or runtime.faulted or not report["reconciled"]:
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_stop(args) -> int:
    from .config import load_config
    from .node import coordinate_shutdown

    cfg = load_config(args.config)
    hosts = [h.id for h in cfg.hosts]
    report = coordinate_shutdown(cfg.reference.endpoint, hosts, timeout_s=args.timeout)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK if report.ok else EXIT_RUNTIME


def _budget_rows(cells, args):
    from .sched import BudgetChain, WindowPlan, classify_feasibility

    ms = 1_000_000
    chain = BudgetChain(round(args.horizon_ms * ms), round(args.sensing_ms * ms), round(args.transmit_ms * ms))
    rows = [("budget", name, value / ms) for name, value in chain.rows()]
    for c in cells:
        if c.p99_ms is None:
            continue
        plan = WindowPlan(1, 1, c.rate_hz)
        verdict = classify_feasibility(plan, round(c.p99_ms * ms), chain)
        rows.append(("feasibility", f"{c.rate_hz:g}Hz/{c.size_bytes}B", verdict.value))
    return rows


def cmd_bench(args) -> int:
    from .plotting import plot_bench
    from .simharness import BENCH_COLUMNS, run_bench, write_bench

    cells = run_bench(args.rates, args.sizes, args.duration, broker_address=args.broker)
    out = Path(args.out)
    csv_path, json_path = write_bench(cells, out)
    fig = plot_bench(cells, out / "bench_latency.png")
    w = csv.writer(sys.stdout)
    w.writerow(BENCH_COLUMNS)
    for c in cells:
        row = c.row()
        w.writerow([row[k] for k in BENCH_COLUMNS])
    print()
    for row in _budget_rows(cells, args):
        w.writerow(row)
    print(f"# wrote {csv_path}, {json_path}, {fig}", file=sys.stderr)
    return EXIT_OK if all(c.lost == 0 for c in cells) else EXIT_RUNTIME


def _session_rate(path: Path, topic: str) -> float | None:
    manifest = path.parent / "session.json"
    if not manifest.exists():
        return None
    meta = json.loads(manifest.read_text())
    speedup = float(meta.get("sim_speedup", 1.0))
    for node in meta.get("config", {}).get("nodes", []):
        if topic in (node.get("publishes") or []) and node.get("sim"):
            return float(node["sim"]["nominal_rate_hz"]) * speedup
    return None


def _profile_h5(path: Path, rate: float | None):
    import h5py

    from .simharness import profile_missingness
    from .storage import _first_topic

    out = []
    with h5py.File(path, "r") as f:
        topics = []
        f.visititems(lambda name, obj: topics.append(name) if isinstance(obj, h5py.Group) and "topic" in obj.attrs else None)
        if not topics:
            topics = [_first_topic(f)]
        for topic in topics:
            g = f[topic]
            tog = g["time_of_generation_ns"][:].astype(np.int64)
            toa = g["time_of_arrival_ns"][:].astype(np.int64)
            times = tog if len(tog) and (tog > 0).all() else toa
            r = rate or _session_rate(path, topic)
            if r is None and len(times) > 1:
                r = 1e9 / float(np.median(np.diff(times)))
            out.append(profile_missingness(times, r or 0.0, modality=topic))
    return out


def cmd_profile(args) -> int:
    from .plotting import plot_missingness
    from .simharness import load_schedule, profile_schedule

    profiles = []
    for p in args.paths:
        path = Path(p)
        if path.suffix in (".jsonl", ".json"):
            sched, spec = load_schedule(path)
            rate = args.rate or (spec.nominal_rate_hz if spec else None)
            if not rate:
                raise ConfigInvalid(f"{path}: no nominal rate in the log header; pass --rate")
            profiles.append(profile_schedule(sched, rate, modality=path.stem))
        else:
            profiles.extend(_profile_h5(path, args.rate))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [p.to_dict() for p in profiles]
    (out / "profile.json").write_text(json.dumps(rows, indent=2))
    cols = ["modality", "nominal_rate_hz", "received", "missing", "ratio", "parts_per_text", "n_gaps", "longest_gap"]
    with open(out / "profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        w.writerows([r[c] for c in cols] for r in rows)
    plot_missingness(profiles, out / "missingness.png")
    for r in rows:
        print(f"{r['modality']}: {r['parts_per_text']} missing ({r['missing']}/{r['expected']}), "
              f"{r['n_gaps']} gaps, longest {r['longest_gap']} samples")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmstream", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one host of a session")
    run.add_argument("--config", required=True)
    run.add_argument("--host", required=True)
    run.add_argument("--output", help="override the config's output_dir")
    run.add_argument("--duration", type=float, help="shut down by itself after this many seconds")
    run.set_defaults(func=cmd_run)

    stop = sub.add_parser("stop", help="coordinated shutdown of every host in a config")
    stop.add_argument("--config", required=True)
    stop.add_argument("--timeout", type=float, default=15.0)
    stop.set_defaults(func=cmd_stop)

    bench = sub.add_parser("bench", help="loopback latency/throughput matrix")
    bench.add_argument("--rates", type=parse_list(float), default=[100, 500, 1000, 2000])
    bench.add_argument("--sizes", type=parse_list(parse_size), default=[1000])
    bench.add_argument("--duration", type=float, default=10.0)
    bench.add_argument("--out", default="bench-out")
    bench.add_argument("--broker", help="use a running broker instead of an in-process one")
    bench.add_argument("--horizon-ms", type=float, default=290.0)
    bench.add_argument("--sensing-ms", type=float, default=45.0)
    bench.add_argument("--transmit-ms", type=float, default=3.0)
    bench.set_defaults(func=cmd_bench)

    prof = sub.add_parser("profile", help="missingness profile of stored files or schedule logs")
    prof.add_argument("paths", nargs="+")
    prof.add_argument("--rate", type=float, help="nominal rate in Hz")
    prof.add_argument("--out", default="profile-out")
    prof.set_defaults(func=cmd_profile)
    return p


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get(LOG_ENV, "WARNING").upper(), logging.WARNING)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MMStreamError, OSError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
