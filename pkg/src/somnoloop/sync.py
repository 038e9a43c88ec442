"""Offline alignment between recordings.

Two paths: direct cross-correlation of co-recorded EEG (same rate, same
content, unknown start offset), and envelope-based EEG-EMG alignment around
a user-marked event (band-pass, rectify, smooth, correlate), with a manual
fallback when the event is too weak to correlate.

Correlation is normalized per lag (zero-mean, unit-norm segments), so gain
differences between recorders do not bias the estimate. Positive lag always
means: the second signal is delayed relative to the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import signal as sps

from .core import SAMPLE_RATE_HZ
from .errors import (DegenerateSignalError, FilterError, RangeError,
                     WeakEventError, WindowError)

DEFAULT_WINDOW_START_S = 100.0
DEFAULT_WINDOW_LEN_S = 30.0
DEFAULT_MAX_LAG_S = 30.0
ENVELOPE_LO_HZ = 10.0
ENVELOPE_HI_HZ = 100.0
ENVELOPE_SMOOTH_MS = 100.0
WEAK_EVENT_CONTRAST = 2.0


class SyncMethod(Enum):
    XCORR = "xcorr"
    ENVELOPE = "envelope"
    MANUAL = "manual"


@dataclass(frozen=True)
class SyncResult:
    lag_samples: int
    peak: Optional[float]              # None for MANUAL
    window_s: Tuple[float, float]      # (start, length)
    method: SyncMethod
    rate_hz: float
    metadata: Dict = field(default_factory=dict)

    @property
    def lag_seconds(self) -> float:
        return self.lag_samples / self.rate_hz


@dataclass(frozen=True)
class Envelope:
    values: np.ndarray
    rate_hz: float
    lo_hz: float
    hi_hz: float
    smooth_ms: float


# ---------------------------------------------------------------------------
# Cross-correlation

def xcorr_lag(a: np.ndarray, b: np.ndarray, rate_hz: float = SAMPLE_RATE_HZ,
              window_start_s: float = DEFAULT_WINDOW_START_S,
              window_len_s: float = DEFAULT_WINDOW_LEN_S,
              max_lag_s: float = DEFAULT_MAX_LAG_S) -> SyncResult:
    """Lag of ``b`` relative to ``a`` by normalized cross-correlation.

    The reference window is cut from ``a``; every candidate lag compares it
    against the equally long window of ``b`` shifted by that lag. Ties are
    broken toward smaller |lag| (the negative one if both signs tie).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w0 = int(round(window_start_s * rate_hz))
    w_len = int(round(window_len_s * rate_hz))
    max_lag = int(round(max_lag_s * rate_hz))
    if w_len <= 1 or w0 < 0 or w0 + w_len > len(a):
        raise WindowError(
            f"window [{window_start_s}, {window_start_s + window_len_s}) s "
            f"outside signal a of {len(a) / rate_hz:.1f} s")

    ref = a[w0:w0 + w_len] - np.mean(a[w0:w0 + w_len])
    ref_norm = float(np.sqrt(np.sum(ref * ref)))
    if ref_norm == 0.0:
        raise DegenerateSignalError("reference window is constant")

    lo = max(-max_lag, -w0)
    hi = min(max_lag, len(b) - w_len - w0)
    if hi < lo:
        raise WindowError(
            f"signal b ({len(b) / rate_hz:.1f} s) leaves no feasible lag for "
            f"this window")

    region = b[w0 + lo:w0 + hi + w_len]
    # numerator: since ref is zero-mean, subtracting each b-segment's mean
    # does not change the dot product
    num = sps.correlate(region, ref, mode="valid", method="fft")
    csum = np.concatenate(([0.0], np.cumsum(region)))
    csum2 = np.concatenate(([0.0], np.cumsum(region * region)))
    seg_sum = csum[w_len:] - csum[:-w_len]
    seg_sum2 = csum2[w_len:] - csum2[:-w_len]
    seg_var = seg_sum2 - seg_sum * seg_sum / w_len
    seg_var = np.maximum(seg_var, 0.0)
    valid = seg_var > 0.0
    if not valid.any():
        raise DegenerateSignalError("every candidate window of b is constant")
    ncc = np.full(len(num), -np.inf)
    ncc[valid] = num[valid] / (ref_norm * np.sqrt(seg_var[valid]))

    lags = np.arange(lo, hi + 1)
    best = ncc.max()
    # exact equality never survives FFT round-off, so treat peaks within
    # 1e-9 as tied; genuinely periodic content then resolves to lag 0
    ties = np.flatnonzero(ncc >= best - 1e-9)
    pick = ties[np.lexsort((lags[ties], np.abs(lags[ties])))[0]]
    return SyncResult(int(lags[pick]), float(ncc[pick]),
                      (window_start_s, window_len_s), SyncMethod.XCORR, rate_hz,
                      metadata={"max_lag_s": max_lag_s})


@dataclass(frozen=True)
class AlignedPair:
    """Overlap of two signals after removing their lag.

    ``offset_a``/``offset_b`` are the number of samples trimmed from each
    signal's start; annotations indexed against either input move by the
    corresponding offset.
    """

    a: np.ndarray
    b: np.ndarray
    offset_a: int
    offset_b: int
    lag_samples: int

    def __len__(self) -> int:
        return len(self.a)


def align(a: np.ndarray, b: np.ndarray, result: SyncResult) -> AlignedPair:
    """Trim both signals to their overlap given the estimated lag.

    For lag >= 0 the merged length is min(|a|, |b| - lag); aligning the
    output again yields lag 0.
    """
    lag = result.lag_samples
    start_a = max(0, -lag)
    start_b = max(0, lag)
    n = min(len(a) - start_a, len(b) - start_b)
    if n <= 0:
        raise WindowError("no overlap between signals at this lag")
    return AlignedPair(a[start_a:start_a + n], b[start_b:start_b + n],
                       start_a, start_b, lag)


# ---------------------------------------------------------------------------
# Envelopes

def envelope(x: np.ndarray, rate_hz: float, lo_hz: float = ENVELOPE_LO_HZ,
             hi_hz: float = ENVELOPE_HI_HZ,
             smooth_ms: float = ENVELOPE_SMOOTH_MS) -> Envelope:
    """Band-pass (4th order, zero phase), rectify, centered moving average."""
    x = np.asarray(x, dtype=np.float64)
    nyquist = rate_hz / 2.0
    if not (0.0 < lo_hz < hi_hz):
        raise FilterError(f"invalid band [{lo_hz}, {hi_hz}] Hz")
    if hi_hz >= nyquist:
        raise FilterError(f"band edge {hi_hz} Hz >= Nyquist {nyquist} Hz")
    sos = sps.butter(4, [lo_hz, hi_hz], btype="bandpass", fs=rate_hz, output="sos")
    rectified = np.abs(sps.sosfiltfilt(sos, x))
    w = max(1, int(round(smooth_ms / 1000.0 * rate_hz)))
    smoothed = np.convolve(rectified, np.ones(w) / w, mode="same")
    return Envelope(smoothed, rate_hz, lo_hz, hi_hz, smooth_ms)


def _contrast(values: np.ndarray) -> float:
    med = float(np.median(values))
    if med <= 0.0:
        return float("inf") if values.max() > 0 else 0.0
    return float(values.max()) / med


def resample_to(x: np.ndarray, rate_from: float, rate_to: float) -> np.ndarray:
    """Polyphase resampling with a rational rate approximation."""
    if rate_from == rate_to:
        return np.asarray(x, dtype=np.float64)
    frac = (Fraction(rate_to) / Fraction(rate_from)).limit_denominator(10000)
    return sps.resample_poly(np.asarray(x, dtype=np.float64),
                             frac.numerator, frac.denominator)


# ---------------------------------------------------------------------------
# EEG-EMG alignment

def sync_emg_auto(eeg: np.ndarray, emg: np.ndarray, emg_rate_hz: float,
                  event_sample_index: int, search_s: float = 30.0,
                  smooth_ms: float = ENVELOPE_SMOOTH_MS) -> SyncResult:
    """Align an external EMG to the EEG around a marked event.

    Both signals are enveloped at the EEG rate; the EEG window around the
    annotation (± ``search_s``) is correlated against the EMG envelope.
    Positive lag: the event appears later in the EMG.
    """
    eeg = np.asarray(eeg, dtype=np.float64)
    rate = float(SAMPLE_RATE_HZ)
    emg_at_eeg_rate = resample_to(emg, emg_rate_hz, rate)

    t_event = event_sample_index / rate
    margin = 2.0  # settle zero-phase filter edges outside the window
    w_start = max(0.0, t_event - search_s)
    w_len = min(t_event + search_s, len(eeg) / rate) - w_start
    if w_len < 2.0:
        raise WindowError("event too close to the recording edge")

    env_eeg = envelope(eeg, rate, smooth_ms=smooth_ms).values
    env_emg = envelope(emg_at_eeg_rate, rate, smooth_ms=smooth_ms).values

    w0 = int(w_start * rate)
    w1 = int((w_start + w_len) * rate)
    if _contrast(env_eeg[w0:w1]) < WEAK_EVENT_CONTRAST:
        raise WeakEventError(
            "no clear event energy in the EEG window; use manual alignment")
    emg_lo = max(0, int((w_start - search_s - margin) * rate))
    emg_hi = min(len(env_emg), int((w_start + w_len + search_s + margin) * rate))
    if _contrast(env_emg[emg_lo:emg_hi]) < WEAK_EVENT_CONTRAST:
        raise WeakEventError(
            "no clear event energy in the EMG search range; use manual alignment")

    result = xcorr_lag(env_eeg, env_emg, rate_hz=rate,
                       window_start_s=w_start, window_len_s=w_len,
                       max_lag_s=search_s)
    lag_native = int(round(result.lag_samples / rate * emg_rate_hz))
    return SyncResult(result.lag_samples, result.peak, result.window_s,
                      SyncMethod.ENVELOPE, rate,
                      metadata={"lag_seconds": result.lag_samples / rate,
                                "emg_rate_hz": emg_rate_hz,
                                "lag_emg_native_samples": lag_native,
                                "event_sample_index": int(event_sample_index)})


def sync_result_to_dict(result: SyncResult) -> Dict:
    return {
        "lag_samples": result.lag_samples,
        "lag_seconds": result.lag_seconds,
        "peak": result.peak,
        "window_s": list(result.window_s),
        "method": result.method.value,
        "rate_hz": result.rate_hz,
        "metadata": dict(result.metadata),
    }


def sync_result_from_dict(d: Dict) -> SyncResult:
    return SyncResult(int(d["lag_samples"]),
                      None if d.get("peak") is None else float(d["peak"]),
                      tuple(d["window_s"]), SyncMethod(d["method"]),
                      float(d["rate_hz"]), dict(d.get("metadata", {})))


def sync_manual(t_eeg_s: float, t_emg_s: float, eeg_duration_s: float,
                emg_duration_s: float, rate_hz: float = SAMPLE_RATE_HZ) -> SyncResult:
    """Lag from two user-picked times of the same event; peak is absent."""
    if not (0.0 <= t_eeg_s <= eeg_duration_s):
        raise RangeError(f"EEG time {t_eeg_s} s outside [0, {eeg_duration_s}] s")
    if not (0.0 <= t_emg_s <= emg_duration_s):
        raise RangeError(f"EMG time {t_emg_s} s outside [0, {emg_duration_s}] s")
    lag_s = t_emg_s - t_eeg_s
    return SyncResult(int(round(lag_s * rate_hz)), None, (t_eeg_s, 0.0),
                      SyncMethod.MANUAL, rate_hz,
                      metadata={"lag_seconds": lag_s})
