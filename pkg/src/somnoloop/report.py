"""Figure rendering for exported sessions.

Everything draws through the Agg backend straight to files; no window
system is touched, so exports work in headless environments. Figures sit
alongside the delimited output so a session directory is reviewable
without any interactive tooling.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import BANDS, SpectralEstimate, TFR
from .core import EPOCH_SECONDS, SAMPLE_RATE_HZ, STAGE_ORDER, SleepStage
from .scoring import Hypnogram

# hypnogram y-axis from top to bottom: W, REM, N1, N2, N3 (REM conventionally
# drawn next to wake)
_HYPNOGRAM_ROWS = (SleepStage.W, SleepStage.REM, SleepStage.N1,
                   SleepStage.N2, SleepStage.N3)
_STAGE_ROW = {s: i for i, s in enumerate(_HYPNOGRAM_ROWS)}

DPI = 120


def _minmax_bins(x: np.ndarray, n_bins: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-bin min and max, so decimation never hides a spike."""
    n = len(x)
    if n <= n_bins:
        return x.copy(), x.copy()
    edges = np.linspace(0, n, n_bins + 1, dtype=int)
    mins = np.minimum.reduceat(x, edges[:-1])
    maxs = np.maximum.reduceat(x, edges[:-1])
    return mins, maxs


def render_hypnogram(hyp: Hypnogram, path: Path,
                     annotations: Sequence = ()) -> Path:
    """Step plot of the stage sequence; markers drawn as vertical ticks."""
    path = Path(path)
    rows = [_STAGE_ROW[s] for s in hyp.stages]
    t = np.asarray(hyp.epoch_indices, dtype=float) * EPOCH_SECONDS / 60.0

    fig, ax = plt.subplots(figsize=(10, 3), constrained_layout=True)
    ax.step(t, rows, where="post", color="#1f4e79", linewidth=1.2)
    for a in annotations:
        ax.axvline(a.sample_index / SAMPLE_RATE_HZ / 60.0, color=a.color,
                   alpha=0.6, linewidth=0.8)
    ax.set_yticks(range(len(_HYPNOGRAM_ROWS)))
    ax.set_yticklabels([s.name for s in _HYPNOGRAM_ROWS])
    ax.invert_yaxis()
    ax.set_xlabel("time (min)")
    ax.set_title("hypnogram")
    ax.grid(axis="x", alpha=0.3)
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_tfr(tfr: TFR, path: Path, fmax: float = 30.0) -> Path:
    """Log-power time-frequency image up to ``fmax`` Hz."""
    path = Path(path)
    keep = tfr.frequencies <= fmax
    power = tfr.power[:, keep]
    floor = power[power > 0].min() if (power > 0).any() else 1.0
    db = 10.0 * np.log10(np.maximum(power, floor))

    fig, ax = plt.subplots(figsize=(10, 3.2), constrained_layout=True)
    mesh = ax.pcolormesh(tfr.times / 60.0, tfr.frequencies[keep], db.T,
                         shading="nearest", cmap="magma")
    fig.colorbar(mesh, ax=ax, label="power (dB)")
    ax.set_xlabel("time (min)")
    ax.set_ylabel("frequency (Hz)")
    ax.set_title("time-frequency power")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_channels_overview(channels: Dict[str, np.ndarray], rate_hz: float,
                             path: Path, n_bins: int = 2000) -> Path:
    """Stacked min/max envelope of every channel over the whole recording."""
    path = Path(path)
    names = list(channels)
    fig, axes = plt.subplots(len(names), 1, figsize=(10, 1.1 * len(names) + 1),
                             sharex=True, constrained_layout=True, squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        x = np.asarray(channels[name], dtype=np.float64)
        mins, maxs = _minmax_bins(x, n_bins)
        t = np.linspace(0, len(x) / rate_hz / 60.0, len(mins))
        ax.fill_between(t, mins, maxs, color="#1f4e79", linewidth=0.0)
        ax.set_ylabel(name, rotation=0, ha="right", va="center", fontsize=8)
        ax.tick_params(labelsize=7)
    axes[-1, 0].set_xlabel("time (min)")
    axes[0, 0].set_title("aligned channels")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_sync_summary(results: Sequence, path: Path) -> Path:
    """Applied alignment steps as labelled lag bars."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 1.0 + 0.7 * max(1, len(results))),
                           constrained_layout=True)
    if results:
        lags = [r.lag_seconds for r in results]
        labels = [r.method.value for r in results]
        y = np.arange(len(results))
        ax.barh(y, lags, color="#2ca02c", height=0.5)
        for i, r in enumerate(results):
            peak = "n/a" if r.peak is None else f"{r.peak:.3f}"
            ax.annotate(f"{r.lag_seconds:+.3f} s (peak {peak})",
                        (r.lag_seconds, i), textcoords="offset points",
                        xytext=(6, -3), fontsize=8)
        ax.set_yticks(y)
        ax.set_yticklabels(labels)
    else:
        ax.text(0.5, 0.5, "no alignment applied", ha="center", va="center")
        ax.set_yticks([])
    ax.axvline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("lag (s)")
    ax.set_title("alignment")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_periodogram(est: SpectralEstimate, path: Path,
                       fmax: float = 48.0) -> Path:
    """PSD with the conventional band edges shaded."""
    path = Path(path)
    keep = est.frequencies <= fmax
    fig, ax = plt.subplots(figsize=(7, 3.2), constrained_layout=True)
    ax.semilogy(est.frequencies[keep], est.power[keep], color="#1f4e79",
                linewidth=1.0)
    palette = ("#f0f0f0", "#e0e8f0")
    for i, (name, (lo, hi)) in enumerate(BANDS.items()):
        ax.axvspan(lo, min(hi, fmax), color=palette[i % 2], zorder=0)
        if lo < fmax:
            ax.annotate(name, ((lo + min(hi, fmax)) / 2, ax.get_ylim()[1]),
                        ha="center", va="top", fontsize=7, alpha=0.7)
    ax.set_xlim(0, fmax)
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("power (uV^2/Hz)")
    ax.set_title("periodogram")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_sync_demo(a: np.ndarray, b: np.ndarray, result, aligned,
                     path: Path, rate_hz: float = SAMPLE_RATE_HZ) -> Path:
    """Before/after overlay around the correlation window."""
    path = Path(path)
    start_s, len_s = result.window_s
    lo = int(start_s * rate_hz)
    hi = lo + int(max(len_s, 2.0) * rate_hz)
    t = np.arange(lo, hi) / rate_hz

    fig, axes = plt.subplots(2, 1, figsize=(10, 5), sharex=True,
                             constrained_layout=True)
    axes[0].plot(t, a[lo:hi], color="#1f4e79", linewidth=0.7, label="a")
    axes[0].plot(t, b[lo:hi], color="#d62728", linewidth=0.7, alpha=0.7,
                 label="b")
    axes[0].set_title(f"before alignment (lag {result.lag_samples} samples, "
                      f"{result.lag_seconds:+.3f} s)")
    axes[0].legend(loc="upper right", fontsize=8)

    hi_al = min(hi, len(aligned.a))
    if hi_al > lo:
        axes[1].plot(t[:hi_al - lo], aligned.a[lo:hi_al], color="#1f4e79",
                     linewidth=0.7)
        axes[1].plot(t[:hi_al - lo], aligned.b[lo:hi_al], color="#d62728",
                     linewidth=0.7, alpha=0.7)
    axes[1].set_title("after alignment (residual lag 0)")
    axes[1].set_xlabel("time (s)")
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_sample_log(rows: Sequence[Tuple[int, int, int]], path: Path) -> Path:
    """Delivered vs stored samples per second; the gap is the drop count."""
    path = Path(path)
    seconds = [r[0] for r in rows]
    delivered = [r[1] for r in rows]
    stored = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(10, 3), constrained_layout=True)
    ax.plot(seconds, delivered, color="#1f4e79", linewidth=1.0,
            label="delivered")
    ax.plot(seconds, stored, color="#d62728", linewidth=1.0, label="stored")
    ax.axhline(SAMPLE_RATE_HZ, color="black", linewidth=0.6, alpha=0.5)
    ax.set_xlabel("second")
    ax.set_ylabel("samples")
    ax.set_title("per-second sample accounting")
    ax.legend(loc="lower right", fontsize=8)
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def render_session_figures(rec, out_dir: Path) -> List[Path]:
    """Standard figure set for an integrated recording export."""
    out_dir = Path(out_dir)
    written: List[Path] = []
    if rec.hypnogram is not None:
        written.append(render_hypnogram(rec.hypnogram,
                                        out_dir / "hypnogram.png",
                                        annotations=list(rec.annotations)))
    if rec.tfr is not None or rec.n_epochs >= 1:
        if rec.tfr is None:
            from .offline import full_night_tfr
            full_night_tfr(rec)
        written.append(render_tfr(rec.tfr, out_dir / "tfr.png"))
    if rec.channels:
        written.append(render_channels_overview(rec.channels, rec.rate_hz,
                                                out_dir / "channels.png"))
    written.append(render_sync_summary(rec.sync_results, out_dir / "sync.png"))
    return written
