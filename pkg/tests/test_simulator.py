"""Headband simulator: sources, jitter schedules, serving, command log."""

import socket
import struct
import time

import numpy as np
import pytest

from somnoloop.core import EPOCH_SAMPLES, SAMPLE_RATE_HZ, SleepStage
from somnoloop.errors import LoadError, ValidationError
from somnoloop.protocol import (
    BlinkPattern,
    ChannelId,
    MessageKind,
    Modality,
    StimulusSpec,
    VisualParams,
    decode_frame_payload,
    decode_message,
    encode_hello,
    encode_stimulus,
    message_to_bytes,
)
from somnoloop.recfiles import RawTextWriter, read_raw_txt
from somnoloop.simulator import (
    DEFAULT_RECIPES,
    HeadbandSimulator,
    JitterModel,
    ReplaySource,
    SyntheticSource,
    epoch_to_raw_block,
    serve,
    synthesize_epoch,
)


def drain_frames(host, port, timeout=30.0):
    """Handshake, then read messages until END_OF_STREAM; returns frames."""
    frames = []
    with socket.create_connection((host, port), timeout=timeout) as conn:
        conn.settimeout(timeout)
        conn.sendall(message_to_bytes(encode_hello([ChannelId.EEG_L])))
        buf = bytearray()
        while True:
            chunk = conn.recv(65536)
            if not chunk:
                break
            buf.extend(chunk)
            done = False
            while len(buf) >= 6:
                _, kind, _, length = struct.unpack_from("<HBBH", buf)
                total = 6 + length + 2
                if len(buf) < total:
                    break
                msg = decode_message(bytes(buf[:total]))
                del buf[:total]
                if msg.kind is MessageKind.DATA_FRAME:
                    frames.append(decode_frame_payload(msg.payload))
                elif msg.kind is MessageKind.SESSION_CTRL and msg.payload[:1] == b"\x02":
                    done = True
            if done:
                break
    return frames


def test_synthetic_source_frame_count():
    src = SyntheticSource([(SleepStage.N2, 2)], seed=1)
    blocks = list(src.blocks())
    assert sum(len(b) for b in blocks) == 2 * EPOCH_SAMPLES
    assert all(b.shape[1] == 10 for b in blocks)
    assert all(b.dtype == np.int16 for b in blocks)


def test_synthetic_source_trims_to_total_frames():
    src = SyntheticSource.for_duration(45.0, seed=1)
    assert src.n_frames == int(45.0 * SAMPLE_RATE_HZ)
    assert sum(len(b) for b in src.blocks()) == src.n_frames


def test_synthetic_source_deterministic():
    a = np.vstack(list(SyntheticSource([(SleepStage.N3, 1)], seed=7).blocks()))
    b = np.vstack(list(SyntheticSource([(SleepStage.N3, 1)], seed=7).blocks()))
    assert np.array_equal(a, b)
    c = np.vstack(list(SyntheticSource([(SleepStage.N3, 1)], seed=8).blocks()))
    assert not np.array_equal(a, c)


def test_stage_schedule_lookup():
    src = SyntheticSource([(SleepStage.W, 2), (SleepStage.REM, 3)])
    assert src.stage_at(0) is SleepStage.W
    assert src.stage_at(1) is SleepStage.W
    assert src.stage_at(2) is SleepStage.REM
    assert src.stage_at(99) is SleepStage.REM   # clamps to the last entry


def test_epoch_to_raw_block_shape():
    epoch = synthesize_epoch(DEFAULT_RECIPES, SleepStage.N2, (0, 0), 0)
    block = epoch_to_raw_block(epoch, seed=0)
    assert block.shape == (EPOCH_SAMPLES, 10)
    assert block.dtype == np.int16


def test_replay_source_roundtrip(tmp_path):
    raw = np.vstack(list(SyntheticSource([(SleepStage.N1, 1)], seed=2).blocks()))
    writer = RawTextWriter(tmp_path / "raw.txt")
    writer.write_block(0, raw)
    writer.close()
    replay = ReplaySource(tmp_path / "raw.txt")
    assert np.array_equal(np.vstack(list(replay.blocks())), raw)


def test_replay_source_too_short(tmp_path):
    raw = np.vstack(list(SyntheticSource([(SleepStage.N1, 1)], seed=2).blocks()))[:100]
    writer = RawTextWriter(tmp_path / "raw.txt")
    writer.write_block(0, raw)
    writer.close()
    with pytest.raises(LoadError):
        ReplaySource(tmp_path / "raw.txt")


# -- jitter ------------------------------------------------------------------

def test_jitter_none_is_nominal_grid():
    t = JitterModel.none().delivery_schedule(512)
    assert np.allclose(t, np.arange(512) / SAMPLE_RATE_HZ)


def test_jitter_schedules_are_monotone():
    for model in (JitterModel.gaussian(5.0, seed=3),
                  JitterModel.bursty(200.0, 2.0),
                  JitterModel.none()):
        t = model.delivery_schedule(SAMPLE_RATE_HZ * 20)
        assert np.all(np.diff(t) >= 0)


def test_jitter_longrun_rate_stays_nominal():
    n = SAMPLE_RATE_HZ * 60
    for model in (JitterModel.gaussian(10.0, seed=1),
                  JitterModel.bursty(300.0, 2.0)):
        t = model.delivery_schedule(n)
        # last frame lands within a second of the nominal 60 s mark
        assert abs(t[-1] - (n - 1) / SAMPLE_RATE_HZ) < 1.0


def test_bursty_defers_to_period_boundary():
    model = JitterModel.bursty(pause_ms=500.0, period_s=2.0)
    t = model.delivery_schedule(SAMPLE_RATE_HZ * 6)
    base = np.arange(SAMPLE_RATE_HZ * 6) / SAMPLE_RATE_HZ
    in_pause = np.mod(base, 2.0) > 1.5
    # everything scheduled in the pause window arrives exactly at the boundary
    assert np.allclose(t[in_pause], (np.floor(base[in_pause] / 2.0) + 1.0) * 2.0)
    assert np.allclose(t[~in_pause], base[~in_pause])


def test_bursty_pause_must_fit_period():
    with pytest.raises(ValidationError):
        JitterModel.bursty(pause_ms=2500.0, period_s=2.0)


def test_jitter_parse():
    assert JitterModel.parse("none").mode == "none"
    g = JitterModel.parse("gaussian:7.5")
    assert g.mode == "gaussian" and g.sigma_ms == 7.5
    b = JitterModel.parse("bursty:150:3")
    assert b.mode == "bursty" and b.pause_ms == 150.0 and b.period_s == 3.0
    with pytest.raises(ValidationError):
        JitterModel.parse("quadratic")


# -- serving over TCP ----------------------------------------------------------

def test_serve_delivers_exact_frame_count():
    src = SyntheticSource.for_duration(60.0, seed=4)
    sim = serve(src, speed=32.0)
    try:
        frames = drain_frames(*sim.address)
    finally:
        sim.stop()
    assert len(frames) == 60 * SAMPLE_RATE_HZ
    indices = [f.sample_index for f in frames]
    assert indices == list(range(60 * SAMPLE_RATE_HZ))


def test_serve_identical_stream_to_multiple_clients():
    src = SyntheticSource([(SleepStage.N2, 1)], seed=5)
    sim = serve(src, speed=32.0)
    try:
        first = drain_frames(*sim.address)
        second = drain_frames(*sim.address)
    finally:
        sim.stop()
    assert [f.sample_index for f in first] == [f.sample_index for f in second]
    assert all(a.values == b.values for a, b in zip(first, second))


def test_command_log_records_stimulus(tmp_path):
    log_path = tmp_path / "commands.jsonl"
    src = SyntheticSource([(SleepStage.N2, 1)], seed=6)
    sim = serve(src, speed=32.0, command_log_path=log_path)
    spec = StimulusSpec(Modality.VISUAL, VisualParams(
        rgb=(0, 0, 255), intensity=50, blink_count=2,
        pattern=BlinkPattern.ALTERNATING, on_ms=100, off_ms=100))
    try:
        with socket.create_connection(sim.address, timeout=10) as conn:
            conn.settimeout(10)
            conn.sendall(message_to_bytes(encode_hello([ChannelId.EEG_L])))
            conn.sendall(message_to_bytes(encode_stimulus(spec)))
            time.sleep(0.5)
    finally:
        sim.stop()
    assert len(sim.command_log) == 1
    entry = sim.command_log[0]
    assert entry.spec == spec
    assert entry.sample_index >= 0
    assert log_path.exists() and log_path.read_text().count("\n") == 1
