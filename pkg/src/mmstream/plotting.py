"""Static report figures (PNG) for bench, missingness and sawtooth results."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bench(cells, path: str | Path) -> Path:
    """Median latency with p99 whiskers, against message size per rate and against rate per size."""
    cells = [c for c in cells if c.median_ms is not None]
    fig, (ax_size, ax_rate) = plt.subplots(1, 2, figsize=(10, 4))
    for rate in sorted({c.rate_hz for c in cells}):
        row = sorted((c for c in cells if c.rate_hz == rate), key=lambda c: c.size_bytes)
        xs = [c.size_bytes / 1e3 for c in row]
        ys = [c.median_ms for c in row]
        err = [[0] * len(row), [c.p99_ms - c.median_ms for c in row]]
        ax_size.errorbar(xs, ys, yerr=err, marker="o", capsize=3, label=f"{rate:g} Hz")
    for size in sorted({c.size_bytes for c in cells}):
        row = sorted((c for c in cells if c.size_bytes == size), key=lambda c: c.rate_hz)
        xs = [c.rate_hz for c in row]
        ys = [c.median_ms for c in row]
        err = [[0] * len(row), [c.p99_ms - c.median_ms for c in row]]
        ax_rate.errorbar(xs, ys, yerr=err, marker="s", capsize=3, label=f"{size / 1e3:g} kB")
    ax_size.set(xscale="log", xlabel="message size [kB]", ylabel="latency [ms]", title="latency vs size")
    ax_rate.set(xscale="log", xlabel="rate [Hz]", ylabel="latency [ms]", title="latency vs rate")
    for ax in (ax_size, ax_rate):
        ax.grid(True, which="both", alpha=0.3)
        if ax.lines:
            ax.legend(fontsize=8)
    return _save(fig, path)


def plot_missingness(profiles, path: str | Path) -> Path:
    """Gap-duration histograms (log-spaced bins) with the parts-per figure in each title."""
    profiles = list(profiles)
    fig, axes = plt.subplots(len(profiles) or 1, 1, figsize=(7, 2.6 * max(1, len(profiles))), squeeze=False)
    for ax, prof in zip(axes[:, 0], profiles):
        hist = prof.histogram
        if hist:
            lefts = [b["lo_s"] for b in hist]
            widths = [b["hi_s"] - b["lo_s"] for b in hist]
            ax.bar(lefts, [b["count"] for b in hist], width=widths, align="edge", edgecolor="k")
            ax.set_xscale("log")
        value, unit = prof.parts_per
        ax.set(title=f"{prof.modality or 'stream'}: {value:.3g} {unit} missing, longest gap {prof.longest_gap}",
               xlabel="gap duration [s]", ylabel="gaps")
    return _save(fig, path)


def plot_sawtooth(result, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.plot(result.times_s, result.buffered_bytes / 1e6, lw=1)
    ax.axhline(result.bound_bytes / 1e6, color="r", ls="--", label="bound")
    ax.set(xlabel="time [s]", ylabel="buffered [MB]", title="accumulate / flush profile")
    ax.legend()
    return _save(fig, path)
