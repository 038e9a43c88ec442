"""Protocol-faithful headband + server stand-in.

Serves data frames at a nominal 256 Hz over TCP with configurable wireless
jitter, accepts stimulation commands and logs them with receipt timestamps.
Jitter perturbs delivery *times* only; every frame is eventually delivered,
so the engine's sample-count clock can be exercised against rate
fluctuation without ever losing data.
"""

from __future__ import annotations

import json
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import protocol
from .core import EPOCH_SAMPLES, SAMPLE_RATE_HZ, Epoch, SleepStage
from .errors import LoadError, StartupError, ValidationError
from .protocol import ChannelId, MessageKind, StimulusSpec, WireMessage

log = logging.getLogger(__name__)

_SEND_CHUNK = 512  # frames per sendall when behind schedule


# ---------------------------------------------------------------------------
# Jitter

@dataclass(frozen=True)
class JitterModel:
    """Delivery-time perturbation; long-run mean rate stays 256 frames/s."""

    mode: str = "none"              # none | gaussian | bursty
    sigma_ms: float = 0.0
    pause_ms: float = 0.0
    period_s: float = 2.0
    seed: int = 0

    @classmethod
    def none(cls) -> "JitterModel":
        return cls()

    @classmethod
    def gaussian(cls, sigma_ms: float = 5.0, seed: int = 0) -> "JitterModel":
        return cls(mode="gaussian", sigma_ms=sigma_ms, seed=seed)

    @classmethod
    def bursty(cls, pause_ms: float = 200.0, period_s: float = 2.0, seed: int = 0) -> "JitterModel":
        if pause_ms / 1000.0 >= period_s:
            raise ValidationError("pause_ms")
        return cls(mode="bursty", pause_ms=pause_ms, period_s=period_s, seed=seed)

    @classmethod
    def parse(cls, text: str) -> "JitterModel":
        """Parse CLI syntax: none | gaussian[:sigma_ms] | bursty[:pause_ms[:period_s]]."""
        parts = text.split(":")
        name = parts[0].lower()
        if name == "none":
            return cls.none()
        if name == "gaussian":
            return cls.gaussian(float(parts[1]) if len(parts) > 1 else 5.0)
        if name == "bursty":
            pause = float(parts[1]) if len(parts) > 1 else 200.0
            period = float(parts[2]) if len(parts) > 2 else 2.0
            return cls.bursty(pause, period)
        raise ValidationError("jitter")

    def delivery_schedule(self, n_frames: int, first_index: int = 0) -> np.ndarray:
        """Virtual delivery times (s) for frames [first_index, first_index + n).

        Monotone by construction; the nominal schedule is k / 256 so the
        long-run rate is exact under every mode.
        """
        k = np.arange(first_index, first_index + n_frames, dtype=np.float64)
        base = k / SAMPLE_RATE_HZ
        if self.mode == "gaussian":
            rng = np.random.default_rng((self.seed, first_index))
            t = base + rng.normal(0.0, self.sigma_ms / 1000.0, n_frames)
            t = np.maximum(t, 0.0)
        elif self.mode == "bursty":
            # Frames scheduled in the pause window before each period
            # boundary are held and burst out at the boundary.
            pause = self.pause_ms / 1000.0
            phase = np.mod(base, self.period_s)
            deferred = phase > (self.period_s - pause)
            t = np.where(deferred, (np.floor(base / self.period_s) + 1.0) * self.period_s, base)
        else:
            t = base
        return np.maximum.accumulate(t)


# ---------------------------------------------------------------------------
# Synthetic EEG

@dataclass(frozen=True)
class StageRecipe:
    """Relative band-power targets and amplitude for one sleep stage."""

    band_weights: Mapping[str, float]   # delta/theta/alpha/sigma/beta, sums to 1
    amplitude_uv: float = 50.0          # RMS of the synthesized EEG
    spindles: bool = False              # amplitude-modulate the sigma band


RECIPE_BANDS = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 12.0),
    "sigma": (12.0, 16.0),
    "beta": (16.0, 30.0),
}

DEFAULT_RECIPES: Dict[SleepStage, StageRecipe] = {
    SleepStage.W: StageRecipe({"delta": 0.05, "theta": 0.10, "alpha": 0.45,
                               "sigma": 0.10, "beta": 0.30}, amplitude_uv=30.0),
    SleepStage.N1: StageRecipe({"delta": 0.15, "theta": 0.50, "alpha": 0.20,
                                "sigma": 0.05, "beta": 0.10}, amplitude_uv=40.0),
    SleepStage.N2: StageRecipe({"delta": 0.30, "theta": 0.25, "alpha": 0.05,
                                "sigma": 0.30, "beta": 0.10}, amplitude_uv=55.0, spindles=True),
    SleepStage.N3: StageRecipe({"delta": 0.70, "theta": 0.12, "alpha": 0.05,
                                "sigma": 0.08, "beta": 0.05}, amplitude_uv=75.0),
    SleepStage.REM: StageRecipe({"delta": 0.20, "theta": 0.30, "alpha": 0.10,
                                 "sigma": 0.05, "beta": 0.35}, amplitude_uv=35.0),
}


def _band_component(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    """Unit-RMS noise whose spectrum is flat inside [lo, hi) and zero outside."""
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE_HZ)
    mask = (freqs >= lo) & (freqs < hi)
    spec = np.zeros(freqs.size, dtype=np.complex128)
    spec[mask] = np.exp(2j * np.pi * rng.random(int(mask.sum())))
    x = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(x ** 2))
    return x / rms if rms > 0 else x


def _spindle_envelope(rng: np.random.Generator, n: int) -> np.ndarray:
    """Burst envelope: ~1 s spindles every 4-8 s with 0.5 s cosine ramps."""
    t = np.arange(n) / SAMPLE_RATE_HZ
    env = np.full(n, 0.25)
    pos = rng.uniform(1.0, 4.0)
    while pos + 2.0 < t[-1]:
        burst_len = rng.uniform(0.8, 1.5)
        ramp = 0.5
        rise = np.clip((t - pos) / ramp, 0.0, 1.0)
        fall = np.clip((pos + burst_len + ramp - t) / ramp, 0.0, 1.0)
        env = np.maximum(env, 0.25 + 0.75 * np.minimum(rise, fall))
        pos += burst_len + rng.uniform(3.0, 7.0)
    return env


def _synthesize_channel(recipe: StageRecipe, rng: np.random.Generator,
                        n: int = EPOCH_SAMPLES) -> np.ndarray:
    total = sum(recipe.band_weights.values())
    x = np.zeros(n)
    for name, weight in recipe.band_weights.items():
        lo, hi = RECIPE_BANDS[name]
        comp = _band_component(rng, n, lo, hi)
        if recipe.spindles and name == "sigma":
            comp = comp * _spindle_envelope(rng, n)
            comp /= np.sqrt(np.mean(comp ** 2))
        x += np.sqrt(weight / total) * comp
    return recipe.amplitude_uv * x / np.sqrt(np.mean(x ** 2))


def synthesize_epoch(recipe: Mapping[SleepStage, StageRecipe], stage: SleepStage,
                     seed, epoch_index: int = 0) -> Epoch:
    """Deterministic 2-channel EEG epoch matching the stage's band recipe.

    Relative band powers of the output track the recipe within 10%.
    ``seed`` may be an int or a tuple of ints.
    """
    stage = SleepStage(stage)
    r = recipe[stage]
    seq = seed if isinstance(seed, tuple) else (seed,)
    rng = np.random.default_rng((*seq, int(stage)))
    left = _synthesize_channel(r, rng)
    right = 0.9 * _synthesize_channel(r, rng)
    return Epoch(epoch_index, {ChannelId.EEG_L: left, ChannelId.EEG_R: right})


def _aux_channels(rng: np.random.Generator, n: int, t0: float) -> Dict[ChannelId, np.ndarray]:
    """Plausible non-EEG channels for full frames."""
    t = t0 + np.arange(n) / SAMPLE_RATE_HZ
    return {
        ChannelId.ACC_X: 0.01 * rng.standard_normal(n),
        ChannelId.ACC_Y: 0.01 * rng.standard_normal(n),
        ChannelId.ACC_Z: 1.0 + 0.01 * rng.standard_normal(n),
        ChannelId.PPG: np.clip(0.5 + 0.3 * np.sin(2 * np.pi * 1.1 * t) +
                               0.02 * rng.standard_normal(n), 0.0, 1.0),
        ChannelId.TEMPERATURE: 36.5 + 0.05 * np.sin(2 * np.pi * t / 600.0),
        ChannelId.AMBIENT_LIGHT: np.full(n, 0.02),
        ChannelId.AMBIENT_NOISE: np.abs(0.03 + 0.005 * rng.standard_normal(n)),
        ChannelId.BATTERY: np.clip(0.95 - t / 36000.0, 0.0, 1.0),
    }


def epoch_to_raw_block(epoch: Epoch, seed: int = 0) -> np.ndarray:
    """Quantized (EPOCH_SAMPLES, 10) int16 block: EEG from the epoch,
    auxiliary channels synthesized deterministically."""
    n = EPOCH_SAMPLES
    rng = np.random.default_rng((seed, epoch.epoch_index, 0xA0))
    aux = _aux_channels(rng, n, epoch.epoch_index * n / SAMPLE_RATE_HZ)
    block = np.zeros((n, len(protocol.CHANNEL_ORDER)), dtype=np.int16)
    for ch in protocol.CHANNEL_ORDER:
        if ch in epoch.channels:
            values = epoch.channels[ch]
        elif ch in aux:
            values = aux[ch]
        else:
            continue
        block[:, int(ch)] = protocol.quantize_channel(values, ch)
    return block


# ---------------------------------------------------------------------------
# Signal sources

@dataclass
class SyntheticSource:
    """Stage-scheduled synthetic night; ``schedule`` is (stage, n_epochs) pairs."""

    schedule: Sequence[Tuple[SleepStage, int]]
    recipes: Mapping[SleepStage, StageRecipe] = field(default_factory=lambda: DEFAULT_RECIPES)
    seed: int = 0
    total_frames: Optional[int] = None   # trim to exactly this many frames

    @classmethod
    def for_duration(cls, seconds: float, stage: SleepStage = SleepStage.N2,
                     seed: int = 0, **kw) -> "SyntheticSource":
        frames = int(SAMPLE_RATE_HZ * seconds)
        epochs = -(-frames // EPOCH_SAMPLES)
        return cls([(stage, epochs)], seed=seed, total_frames=frames, **kw)

    def stage_at(self, epoch_index: int) -> SleepStage:
        i = epoch_index
        for stage, count in self.schedule:
            if i < count:
                return SleepStage(stage)
            i -= count
        return SleepStage(self.schedule[-1][0])

    @property
    def n_frames(self) -> int:
        total = sum(count for _, count in self.schedule) * EPOCH_SAMPLES
        return min(total, self.total_frames) if self.total_frames is not None else total

    def blocks(self) -> Iterator[np.ndarray]:
        remaining = self.n_frames
        epoch_index = 0
        while remaining > 0:
            stage = self.stage_at(epoch_index)
            epoch = synthesize_epoch(self.recipes, stage, (self.seed, epoch_index), epoch_index)
            block = epoch_to_raw_block(epoch, self.seed)
            yield block[:remaining] if remaining < len(block) else block
            remaining -= min(remaining, len(block))
            epoch_index += 1


@dataclass
class ReplaySource:
    """Re-serves a raw recording written by the acquisition engine."""

    path: Path
    loop: bool = False

    def __post_init__(self):
        from .recfiles import read_raw_txt
        self.path = Path(self.path)
        rec = read_raw_txt(self.path)
        if rec.n_samples < EPOCH_SAMPLES:
            raise LoadError(f"{self.path}: replay source shorter than one epoch "
                            f"({rec.n_samples} samples)")
        self._raw = rec.to_raw_matrix()

    @property
    def n_frames(self) -> int:
        return len(self._raw)

    def blocks(self) -> Iterator[np.ndarray]:
        while True:
            for start in range(0, len(self._raw), EPOCH_SAMPLES):
                yield self._raw[start:start + EPOCH_SAMPLES]
            if not self.loop:
                return


# ---------------------------------------------------------------------------
# Command log

@dataclass(frozen=True)
class CommandLogEntry:
    receipt_ms: float        # wall clock, ms since epoch
    sample_index: int        # frames sent to the issuing client at receipt
    spec: StimulusSpec

    def to_json(self) -> str:
        return json.dumps({"receipt_ms": self.receipt_ms, "sample_index": self.sample_index,
                           "spec": protocol.stimulus_to_dict(self.spec)})


# ---------------------------------------------------------------------------
# Server

class HeadbandSimulator:
    """TCP server streaming DATA_FRAMEs and acknowledging stimulation commands.

    ``speed`` scales delivery pacing (1.0 = real time, 0 = as fast as
    possible); jitter schedules are computed in virtual stream time, so the
    per-second delivery log is exact at any speed.
    """

    def __init__(self, source, jitter: Optional[JitterModel] = None, port: int = 0,
                 host: str = "127.0.0.1", speed: float = 1.0,
                 command_log_path: Optional[Path] = None):
        self.source = source
        self.jitter = jitter or JitterModel.none()
        self.speed = speed
        self._host, self._port = host, port
        self._sock: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._threads: List[threading.Thread] = []
        self.command_log: List[CommandLogEntry] = []
        self.error_log: List[dict] = []
        self.delivery_logs: List[Dict[int, int]] = []  # per client: virtual second -> frames
        self._command_log_path = Path(command_log_path) if command_log_path else None
        self._command_log_file = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "HeadbandSimulator":
        try:
            self._sock = socket.create_server((self._host, self._port))
        except OSError as exc:
            raise StartupError(f"cannot bind {self._host}:{self._port}: {exc}") from exc
        self._sock.settimeout(0.2)
        if self._command_log_path:
            self._command_log_file = open(self._command_log_path, "a", encoding="utf-8")
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="sim-accept", daemon=True)
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._accept_thread:
            self._accept_thread.join(timeout=5.0)
        for t in self._threads:
            t.join(timeout=5.0)
        if self._sock:
            self._sock.close()
        if self._command_log_file:
            self._command_log_file.close()
            self._command_log_file = None

    def __enter__(self) -> "HeadbandSimulator":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    @property
    def address(self) -> Tuple[str, int]:
        return self._sock.getsockname()[:2]

    # -- command handling ----------------------------------------------------

    def handle_command(self, msg: WireMessage, sample_index: int) -> WireMessage:
        """Decode a stimulation command, log it, and build the ACK/NACK."""
        try:
            spec = protocol.decode_stimulus(msg)
        except Exception as exc:
            with self._lock:
                self.error_log.append({"error": type(exc).__name__, "detail": str(exc),
                                       "sample_index": sample_index})
            return protocol.encode_ack(sample_index, status=1)
        entry = CommandLogEntry(time.time() * 1000.0, sample_index, spec)
        with self._lock:
            self.command_log.append(entry)
            if self._command_log_file:
                self._command_log_file.write(entry.to_json() + "\n")
                self._command_log_file.flush()
        return protocol.encode_ack(sample_index, status=protocol.ACK_OK)

    # -- internals ------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(target=self._serve_client, args=(conn,),
                                 name="sim-client", daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_client(self, conn: socket.socket) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sent_counter = {"n": 0}
        send_lock = threading.Lock()
        delivery_log: Dict[int, int] = {}
        with self._lock:
            self.delivery_logs.append(delivery_log)
        try:
            if not self._handshake(conn, send_lock):
                return
            reader = threading.Thread(target=self._client_reader,
                                      args=(conn, send_lock, sent_counter),
                                      name="sim-cmd-reader", daemon=True)
            reader.start()
            self._deliver(conn, send_lock, sent_counter, delivery_log)
            # Linger briefly so late commands still get their ACK.
            reader.join(timeout=1.0)
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()

    def _handshake(self, conn: socket.socket, send_lock: threading.Lock) -> bool:
        conn.settimeout(10.0)
        try:
            msg = _read_message(conn)
            op, _channels = protocol.decode_session_ctrl(msg)
        except Exception:
            return False
        if op is not protocol.SessionCtrl.HELLO:
            return False
        with send_lock:
            conn.sendall(protocol.message_to_bytes(protocol.encode_ack(0)))
        return True

    def _client_reader(self, conn, send_lock, sent_counter) -> None:
        while not self._stop.is_set():
            try:
                msg = _read_message(conn)
            except (OSError, EOFError, ValueError):
                return
            if msg.kind is MessageKind.STIM_COMMAND:
                ack = self.handle_command(msg, sent_counter["n"])
            else:
                with self._lock:
                    self.error_log.append({"error": "UnexpectedKind", "detail": msg.kind.name,
                                           "sample_index": sent_counter["n"]})
                ack = protocol.encode_ack(sent_counter["n"], status=2)
            try:
                with send_lock:
                    conn.sendall(protocol.message_to_bytes(ack))
            except OSError:
                return

    def _deliver(self, conn, send_lock, sent_counter, delivery_log: Dict[int, int]) -> None:
        """Send every source frame at its jittered schedule time."""
        conn.settimeout(30.0)
        start = time.perf_counter()
        k = 0
        for block in self.source.blocks():
            if self._stop.is_set():
                return
            n = len(block)
            sched = self.jitter.delivery_schedule(n, first_index=k)
            payload = protocol.encode_frames_bulk(k, block)
            seconds = np.floor(sched).astype(int)
            for sec in np.unique(seconds):
                delivery_log[int(sec)] = delivery_log.get(int(sec), 0) + int((seconds == sec).sum())
            i = 0
            while i < n:
                if self._stop.is_set():
                    return
                if self.speed and self.speed > 0:
                    target = start + sched[i] / self.speed
                    now = time.perf_counter()
                    if target - now > 0.0005:
                        time.sleep(min(target - now, 0.05))
                        continue
                    # everything due now goes out in one write
                    due = int(np.searchsorted(sched, (time.perf_counter() - start) * self.speed,
                                              side="right"))
                    j = max(i + 1, min(due, n))
                else:
                    j = min(i + _SEND_CHUNK, n)
                with send_lock:
                    conn.sendall(payload[i * protocol.FRAME_RECORD_SIZE:
                                         j * protocol.FRAME_RECORD_SIZE])
                sent_counter["n"] = k + j
                i = j
            k += n
        with send_lock:
            conn.sendall(protocol.message_to_bytes(protocol.encode_end_of_stream()))


def _read_message(conn: socket.socket) -> WireMessage:
    """Read exactly one length-prefixed message from a blocking socket."""
    head = _read_exact(conn, protocol.HEADER_SIZE)
    _magic, _kind, _version, payload_len = struct.unpack("<HBBH", head)
    rest = _read_exact(conn, payload_len + 2)
    return protocol.decode_message(head + rest)


def _read_exact(conn: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            raise EOFError("connection closed")
        buf.extend(chunk)
    return bytes(buf)


def serve(source, jitter: Optional[JitterModel] = None, port: int = 0,
          **kwargs) -> HeadbandSimulator:
    """Start a simulator and return the running server handle."""
    sim = HeadbandSimulator(source, jitter=jitter, port=port, **kwargs)
    return sim.start()
