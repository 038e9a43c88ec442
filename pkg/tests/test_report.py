"""Figure rendering: every renderer must leave a real PNG behind."""

from pathlib import Path

import numpy as np
import pytest

from conftest import synthetic_raw_matrix
from somnoloop import offline, report
from somnoloop.analysis import periodogram, tfr_epoch
from somnoloop.core import SleepStage
from somnoloop.protocol import CHANNEL_ORDER
from somnoloop.recfiles import RawRecording
from somnoloop.scoring import Hypnogram
from somnoloop.stimulation import KIND_MANUAL, AnnotationStore
from somnoloop.sync import SyncMethod, SyncResult, align, xcorr_lag

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def assert_png(path, min_bytes=2000):
    data = Path(path).read_bytes()
    assert data[:8] == PNG_MAGIC
    # an empty Agg canvas is well under 2 kB; any drawn figure is not
    assert len(data) >= min_bytes


def make_hypnogram(stages):
    conf = np.full((len(stages), 5), 0.05)
    for i, s in enumerate(stages):
        conf[i, int(s)] = 0.8
    return Hypnogram(np.arange(len(stages)), list(stages), conf)


def test_hypnogram_figure(tmp_path):
    hyp = make_hypnogram([SleepStage.W, SleepStage.N1, SleepStage.N2,
                          SleepStage.N3, SleepStage.N2, SleepStage.REM])
    store = AnnotationStore("fig")
    store.append(KIND_MANUAL, "lights off", 0)
    store.append(KIND_MANUAL, "door", 4 * 7680)
    out = report.render_hypnogram(hyp, tmp_path / "hyp.png",
                                  annotations=list(store))
    assert out == tmp_path / "hyp.png"
    assert_png(out)


def test_tfr_figure(tmp_path, n2_epoch):
    tfr = tfr_epoch(n2_epoch)
    assert_png(report.render_tfr(tfr, tmp_path / "tfr.png"))
    assert_png(report.render_tfr(tfr, tmp_path / "tfr_narrow.png", fmax=16.0))


def test_periodogram_figure(tmp_path, n2_epoch):
    est = periodogram(n2_epoch)
    assert_png(report.render_periodogram(est, tmp_path / "psd.png"))


def test_channels_overview_figure(tmp_path):
    rng = np.random.default_rng(3)
    channels = {
        "EEG_L": rng.normal(size=60 * 256),
        "EEG_R": rng.normal(size=60 * 256),
        "EMG": rng.normal(size=500),     # shorter than the bin count
    }
    out = report.render_channels_overview(channels, 256.0,
                                          tmp_path / "channels.png")
    assert_png(out)


def test_sync_summary_figure(tmp_path):
    results = [
        SyncResult(896, 0.97, (100.0, 30.0), SyncMethod.XCORR, 256.0),
        SyncResult(-64, None, (0.0, 0.0), SyncMethod.MANUAL, 256.0),
    ]
    assert_png(report.render_sync_summary(results, tmp_path / "sync.png"))
    # an un-aligned session still gets a (labelled empty) figure
    assert_png(report.render_sync_summary([], tmp_path / "sync_empty.png"))


def test_sync_demo_figure(tmp_path):
    rng = np.random.default_rng(9)
    base = rng.normal(size=10 * 256 + 64)
    a, b = base[64:], base[:-64]        # b delayed by 64 samples
    result = xcorr_lag(a, b, window_start_s=2.0, window_len_s=3.0,
                       max_lag_s=1.0)
    assert result.lag_samples == 64
    aligned = align(a, b, result)
    out = report.render_sync_demo(a, b, result, aligned, tmp_path / "demo.png")
    assert_png(out)


def test_sample_log_figure(tmp_path):
    rows = [(s, 256, 256 if s % 5 else 252) for s in range(60)]
    assert_png(report.render_sample_log(rows, tmp_path / "log.png"))


def test_session_figure_set(tmp_path, small_model):
    matrix = synthetic_raw_matrix(2, seed=21)
    rec = offline.integrate(lossless=RawRecording(
        np.arange(len(matrix), dtype=np.int64), matrix, list(CHANNEL_ORDER)))
    rec.annotations.append(KIND_MANUAL, "cue", 100)
    offline.score_offline(rec, small_model)

    written = report.render_session_figures(rec, tmp_path)
    assert {p.name for p in written} == {"hypnogram.png", "tfr.png",
                                         "channels.png", "sync.png"}
    for p in written:
        assert p.parent == tmp_path
        assert_png(p)
    # rendering attached the full-night image it had to compute
    assert rec.tfr is not None


def test_session_figure_set_unscored(tmp_path):
    matrix = synthetic_raw_matrix(1, seed=22)
    rec = offline.integrate(lossless=RawRecording(
        np.arange(len(matrix), dtype=np.int64), matrix, list(CHANNEL_ORDER)))
    written = report.render_session_figures(rec, tmp_path)
    assert {p.name for p in written} == {"tfr.png", "channels.png", "sync.png"}
