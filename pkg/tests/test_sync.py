"""Cross-correlation alignment, envelopes, and EEG-EMG synchronization."""

import numpy as np
import pytest

from somnoloop.core import SAMPLE_RATE_HZ
from somnoloop.errors import (
    DegenerateSignalError,
    FilterError,
    RangeError,
    WeakEventError,
    WindowError,
)
from somnoloop.sync import (
    SyncMethod,
    SyncResult,
    align,
    envelope,
    resample_to,
    sync_emg_auto,
    sync_manual,
    sync_result_from_dict,
    sync_result_to_dict,
    xcorr_lag,
)

RATE = SAMPLE_RATE_HZ
SNR_20DB_NOISE = 0.1  # unit-variance signal


def planted_pair(lag: int, seed: int = 0, dur_s: int = 180):
    """Two noisy views of one source with ``b`` delayed by ``lag`` samples."""
    n = dur_s * RATE
    rng = np.random.default_rng((42, seed))
    base = rng.standard_normal(n + abs(lag))
    if lag >= 0:
        a, b = base[lag:lag + n], base[:lag + n]
    else:
        a, b = base[:n], base[-lag:-lag + n]
    a = a + SNR_20DB_NOISE * rng.standard_normal(len(a))
    b = b + SNR_20DB_NOISE * rng.standard_normal(len(b))
    return a, b


@pytest.mark.parametrize("lag", [0, 1, -1, 256, -256, 2172, 7680, -7680])
def test_xcorr_recovers_planted_lag_exactly(lag):
    a, b = planted_pair(lag, seed=lag & 0xFF)
    result = xcorr_lag(a, b)
    assert result.lag_samples == lag
    assert result.peak > 0.9
    assert result.method is SyncMethod.XCORR
    assert result.lag_seconds == pytest.approx(lag / RATE)


def test_xcorr_antisymmetric():
    a, b = planted_pair(512)
    assert xcorr_lag(a, b).lag_samples == 512
    assert xcorr_lag(b, a).lag_samples == -512


def test_xcorr_gain_and_offset_invariant():
    a, b = planted_pair(300, seed=7)
    base = xcorr_lag(a, b)
    shifted = xcorr_lag(a, 3.5 * b + 10.0)
    assert shifted.lag_samples == base.lag_samples
    assert shifted.peak == pytest.approx(base.peak, abs=1e-9)


def test_xcorr_periodic_ties_resolve_to_zero():
    t = np.arange(180 * RATE) / RATE
    tone = np.sin(2 * np.pi * 10.0 * t)
    result = xcorr_lag(tone, tone)
    assert result.lag_samples == 0
    assert result.peak == pytest.approx(1.0, abs=1e-6)


def test_xcorr_window_validation():
    a, b = planted_pair(0, dur_s=60)
    with pytest.raises(WindowError):
        xcorr_lag(a, b, window_start_s=50.0, window_len_s=30.0)
    with pytest.raises(WindowError):
        xcorr_lag(a, b, window_start_s=-1.0, window_len_s=10.0)
    # b too short to place any candidate window
    with pytest.raises(WindowError):
        xcorr_lag(planted_pair(0)[0], b[:10000])


def test_xcorr_degenerate_signals():
    a, b = planted_pair(0, dur_s=150)
    flat = np.zeros_like(a)
    with pytest.raises(DegenerateSignalError):
        xcorr_lag(flat, b)
    with pytest.raises(DegenerateSignalError):
        xcorr_lag(a, np.full_like(b, 2.0))


def test_align_trims_to_overlap():
    a, b = planted_pair(1000, seed=3)
    result = xcorr_lag(a, b)
    pair = align(a, b, result)
    assert pair.offset_a == 0
    assert pair.offset_b == 1000
    assert len(pair) == min(len(a), len(b) - 1000)
    residual = xcorr_lag(pair.a, pair.b)
    assert residual.lag_samples == 0
    again = align(pair.a, pair.b, residual)
    assert again.offset_a == again.offset_b == 0
    assert np.array_equal(again.a, pair.a)


def test_align_negative_lag_and_no_overlap():
    a, b = planted_pair(-750, seed=4)
    pair = align(a, b, xcorr_lag(a, b))
    assert pair.offset_a == 750
    assert pair.offset_b == 0
    fake = SyncResult(200, 1.0, (0.0, 0.0), SyncMethod.XCORR, RATE)
    with pytest.raises(WindowError):
        align(np.zeros(100), np.zeros(100), fake)


# ---------------------------------------------------------------------------
# Envelopes and resampling

def test_envelope_removes_dc():
    env = envelope(np.full(4096, 25.0), rate_hz=1000.0)
    assert np.max(np.abs(env.values)) < 1e-6


def test_envelope_tracks_tone_amplitude():
    rate = 1000.0
    t = np.arange(int(8 * rate)) / rate
    amp = 12.0
    env = envelope(amp * np.sin(2 * np.pi * 50.0 * t), rate_hz=rate)
    interior = env.values[int(rate):-int(rate)]
    # rectified sine averages to 2/pi of its amplitude
    assert np.mean(interior) == pytest.approx(amp * 2 / np.pi, rel=0.02)
    assert np.ptp(interior) < 0.1 * amp


def test_envelope_band_validation():
    x = np.zeros(1024)
    with pytest.raises(FilterError):
        envelope(x, rate_hz=180.0)          # hi 100 >= Nyquist 90
    with pytest.raises(FilterError):
        envelope(x, rate_hz=1000.0, lo_hz=0.0)
    with pytest.raises(FilterError):
        envelope(x, rate_hz=1000.0, lo_hz=60.0, hi_hz=40.0)


def test_resample_identity_and_rates():
    x = np.sin(2 * np.pi * 5.0 * np.arange(4000) / 1000.0)
    assert np.array_equal(resample_to(x, 256.0, 256.0), x)
    up = resample_to(x, 1000.0, 2000.0)
    assert len(up) == 8000
    down = resample_to(x, 1000.0, 256.0)
    assert len(down) == 1024
    t_down = np.arange(len(down)) / 256.0
    expected = np.sin(2 * np.pi * 5.0 * t_down)
    assert np.allclose(down[50:-50], expected[50:-50], atol=5e-3)


# ---------------------------------------------------------------------------
# EEG-EMG alignment

def emg_scenario(lag_s=3.5, emg_rate=200.0, dur_s=120.0, seed=0):
    """EEG and native-rate EMG sharing one burst, EMG delayed by ``lag_s``."""
    rng = np.random.default_rng((77, seed))
    t_eeg = np.arange(int(dur_s * RATE)) / RATE
    t_emg = np.arange(int(dur_s * emg_rate)) / emg_rate

    def burst(t, at):
        on = (t >= at) & (t < at + 2.0)
        return np.where(on, 30.0 * np.sin(2 * np.pi * 25.0 * t), 0.0)

    eeg = 0.5 * rng.standard_normal(len(t_eeg)) + burst(t_eeg, 60.0)
    emg = 0.5 * rng.standard_normal(len(t_emg)) + burst(t_emg, 60.0 + lag_s)
    return eeg, emg, int(60.0 * RATE)


def test_sync_emg_auto_within_50ms():
    eeg, emg, event = emg_scenario()
    result = sync_emg_auto(eeg, emg, emg_rate_hz=200.0, event_sample_index=event)
    assert result.method is SyncMethod.ENVELOPE
    assert abs(result.lag_seconds - 3.5) <= 0.05
    assert abs(result.metadata["lag_emg_native_samples"] - 3.5 * 200.0) <= 10
    manual = sync_manual(60.0, 63.5, 120.0, 120.0)
    assert abs(manual.lag_samples - result.lag_samples) <= int(0.05 * RATE)


def test_sync_emg_auto_negative_lag():
    eeg, emg, event = emg_scenario(lag_s=-1.25, seed=2)
    result = sync_emg_auto(eeg, emg, emg_rate_hz=200.0, event_sample_index=event)
    assert abs(result.lag_seconds - (-1.25)) <= 0.05


def test_sync_emg_weak_event_gates():
    eeg, emg, event = emg_scenario()
    flat_eeg = 0.5 * np.random.default_rng(1).standard_normal(len(eeg))
    with pytest.raises(WeakEventError, match="EEG window"):
        sync_emg_auto(flat_eeg, emg, emg_rate_hz=200.0, event_sample_index=event)
    flat_emg = 0.5 * np.random.default_rng(2).standard_normal(len(emg))
    with pytest.raises(WeakEventError, match="EMG search"):
        sync_emg_auto(eeg, flat_emg, emg_rate_hz=200.0, event_sample_index=event)


def test_sync_emg_window_too_small():
    eeg, emg, _ = emg_scenario()
    with pytest.raises(WindowError):
        sync_emg_auto(eeg, emg, emg_rate_hz=200.0,
                      event_sample_index=int(0.2 * RATE), search_s=0.5)


def test_sync_manual_contract():
    result = sync_manual(60.0, 63.5, 120.0, 120.0)
    assert result.lag_samples == round(3.5 * RATE)
    assert result.peak is None
    assert result.method is SyncMethod.MANUAL
    assert sync_manual(10.0, 4.0, 120.0, 120.0).lag_samples == round(-6.0 * RATE)
    with pytest.raises(RangeError):
        sync_manual(-1.0, 5.0, 120.0, 120.0)
    with pytest.raises(RangeError):
        sync_manual(5.0, 130.0, 120.0, 120.0)


def test_sync_result_dict_round_trip():
    a, b = planted_pair(640, seed=5)
    result = xcorr_lag(a, b)
    assert sync_result_from_dict(sync_result_to_dict(result)) == result
    manual = sync_manual(1.0, 2.0, 10.0, 10.0)
    assert sync_result_from_dict(sync_result_to_dict(manual)) == manual
