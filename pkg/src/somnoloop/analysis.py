"""Per-epoch spectral analysis: Welch periodogram, short-time TFR, band power.

Pure functions over epochs; the combined periodogram + TFR + rolling window
update is budgeted to fit inside the acquisition analysis window (30 ms).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import signal as sps

from .core import EPOCH_SECONDS, SAMPLE_RATE_HZ
from .errors import DataError, RangeError
from .protocol import ChannelId

# Welch: 4-s Hann segments, 50% overlap -> df = 0.25 Hz.
WELCH_NPERSEG = 4 * SAMPLE_RATE_HZ
WELCH_NOVERLAP = WELCH_NPERSEG // 2
# TFR: 2-s Hann segments, 75% overlap -> one column per 0.5 s.
TFR_NPERSEG = 2 * SAMPLE_RATE_HZ
TFR_NOVERLAP = 3 * TFR_NPERSEG // 4

# Canonical sleep-EEG bands (Hz); total power is taken over 0.5-48.
BANDS = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 12.0),
    "sigma": (12.0, 16.0),
    "beta": (16.0, 30.0),
    "gamma": (30.0, 48.0),
}
TOTAL_BAND = (0.5, 48.0)


@dataclass
class SpectralEstimate:
    """One-sided PSD in uV^2/Hz over [0, Nyquist]."""

    frequencies: np.ndarray
    power: np.ndarray
    df: float
    method: str = "welch"


@dataclass
class TFR:
    """Time-frequency power matrix, shape (time bins, frequency bins)."""

    times: np.ndarray       # seconds, absolute (epoch offset applied)
    frequencies: np.ndarray
    power: np.ndarray


def _epoch_signal(epoch, channel) -> np.ndarray:
    x = np.asarray(epoch.channel(ChannelId(channel)), dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError(f"non-finite samples in channel {ChannelId(channel).name}")
    return x


def welch_psd(x: np.ndarray) -> SpectralEstimate:
    """Welch-averaged PSD of a raw sample array at the device rate."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite samples")
    freqs, pxx = sps.welch(x, fs=SAMPLE_RATE_HZ, window="hann",
                           nperseg=WELCH_NPERSEG, noverlap=WELCH_NOVERLAP,
                           detrend="constant", scaling="density")
    return SpectralEstimate(freqs, pxx, float(freqs[1] - freqs[0]))


def periodogram(epoch, channel=ChannelId.EEG_L) -> SpectralEstimate:
    """Welch-averaged PSD of one epoch channel.

    Integrated power tracks the time-domain variance (Parseval, within 5%
    for broadband signals).
    """
    return welch_psd(_epoch_signal(epoch, channel))


def tfr_epoch(epoch, channel=ChannelId.EEG_L) -> TFR:
    """Short-time PSD over one epoch; columns every 0.5 s."""
    x = _epoch_signal(epoch, channel)
    freqs, times, sxx = sps.spectrogram(x, fs=SAMPLE_RATE_HZ, window="hann",
                                        nperseg=TFR_NPERSEG, noverlap=TFR_NOVERLAP,
                                        detrend="constant", scaling="density")
    times = times + epoch.epoch_index * EPOCH_SECONDS
    return TFR(times, freqs, sxx.T.copy())


def rolling_tfr(window: Sequence[TFR], max_epochs: int = 4) -> TFR:
    """Concatenate the last <= max_epochs epoch TFRs into one display window.

    The oldest epoch is evicted when the window already spans max_epochs;
    per-epoch columns are preserved bit-exactly.
    """
    if not window:
        raise ValueError("rolling_tfr needs at least one epoch TFR")
    kept = list(window)[-max_epochs:]
    times = np.concatenate([t.times for t in kept])
    power = np.vstack([t.power for t in kept])
    return TFR(times, kept[0].frequencies.copy(), power)


def bandpower(est: SpectralEstimate, lo: float, hi: float) -> Tuple[float, float]:
    """Trapezoidal band power over [lo, hi] plus its share of 0.5-48 Hz.

    Band edges are assumed to sit on the frequency grid (df = 0.25 Hz for the
    default Welch setup), which makes disjoint bands exactly additive.
    """
    if not (0.0 <= lo < hi <= SAMPLE_RATE_HZ / 2):
        raise RangeError(f"band [{lo}, {hi}] outside [0, {SAMPLE_RATE_HZ / 2}] or inverted")
    power = _integrate(est, lo, hi)
    total = _integrate(est, *TOTAL_BAND)
    relative = power / total if total > 0 else 0.0
    return power, relative


def _integrate(est: SpectralEstimate, lo: float, hi: float) -> float:
    mask = (est.frequencies >= lo) & (est.frequencies <= hi)
    if mask.sum() < 2:
        return 0.0
    return float(np.trapezoid(est.power[mask], est.frequencies[mask]))


def band_summary(est: SpectralEstimate) -> dict:
    """Absolute and relative power for every canonical band."""
    out = {}
    for name, (lo, hi) in BANDS.items():
        absolute, relative = bandpower(est, lo, hi)
        out[name] = {"power": absolute, "relative": relative}
    return out
