"""Real-time acquisition client and its socket-free core.

The engine keeps time by accepted sample count, never by wall clock: 7680
accepted samples close an epoch regardless of delivery jitter.  Under the
DROP policy, frames arriving while epoch analysis is running are counted in
the per-second log but discarded, keeping the stream synchronized with the
device at the cost of a few samples per epoch; BUFFER keeps everything.

`StreamEngine` contains all policy and accounting logic and is driven by
explicit delivery timestamps, so tests can replay deterministic schedules.
`RecordingClient` wraps it with the TCP transport and real threads.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import analysis, protocol, recfiles, stimulation
from .core import EPOCH_SAMPLES, Epoch
from .errors import ConnectError, FinalizeError, StreamOrderError
from .protocol import CHANNEL_ORDER, ChannelId, MessageKind, StimulusSpec

log = logging.getLogger(__name__)

DEFAULT_CHANNELS = (ChannelId.EEG_L, ChannelId.EEG_R)
DEFAULT_BUDGET_MS = 30.0


class Policy(Enum):
    DROP = "drop"
    BUFFER = "buffer"


@dataclass
class EpochEvent:
    """A completed epoch plus analysis results attached afterwards."""

    epoch: Epoch
    first_sample_index: int
    raw: np.ndarray                     # (7680, 10) int16, wire channel order
    t_completed: float                  # session-relative seconds
    prediction: Optional[Tuple] = None  # (stage, confidence, per-stage probs)
    spectrum: Optional[analysis.SpectralEstimate] = None
    tfr: Optional[analysis.TFR] = None
    dropped_after: int = 0              # samples dropped during this epoch's analysis
    analysis_ms: Optional[float] = None
    budget_exceeded: bool = False


class StreamEngine:
    """Sample-count clock, epoch assembly, and backpressure policy.

    ``busy_fn``, when given, reports the epoch index currently being analyzed
    (or None when idle) and overrides the built-in virtual busy window; use
    ``virtual_stall_s`` instead to model a fixed analysis stall against the
    delivery timestamps passed to ``ingest_block``.
    """

    def __init__(self, policy: Policy = Policy.DROP,
                 channels: Sequence[ChannelId] = DEFAULT_CHANNELS,
                 writer: Optional[recfiles.RawTextWriter] = None,
                 virtual_stall_s: float = 0.0,
                 busy_fn: Optional[Callable[[], Optional[int]]] = None):
        self.policy = Policy(policy)
        self.channels = [ChannelId(c) for c in channels]
        self.writer = writer
        self.virtual_stall_s = virtual_stall_s
        self.busy_fn = busy_fn

        self._buf = np.zeros((EPOCH_SAMPLES, len(CHANNEL_ORDER)), dtype=np.int16)
        self._buf_indices = np.zeros(EPOCH_SAMPLES, dtype=np.int64)
        self._fill = 0
        self._last_index = -1
        self._busy_until = -1.0
        self._busy_epoch: Optional[int] = None
        self._epochs_emitted = 0

        self.per_second: Dict[int, List[int]] = {}   # second -> [delivered, stored]
        self.drop_log: Dict[int, int] = {}           # epoch_index -> samples dropped
        self.order_errors: List[dict] = []
        self.discarded_partials: List[dict] = []
        self.total_delivered = 0
        self.total_stored = 0
        self.ended = False

    # -- accounting -----------------------------------------------------------

    def _count(self, times: np.ndarray, stored: bool) -> None:
        secs = np.floor(times).astype(np.int64)
        uniq, n = np.unique(secs, return_counts=True)
        for s, c in zip(uniq, n):
            row = self.per_second.setdefault(int(s), [0, 0])
            row[0] += int(c)
            if stored:
                row[1] += int(c)
        self.total_delivered += len(times)
        if stored:
            self.total_stored += len(times)

    def _analysis_target(self, t: float) -> Optional[int]:
        """Epoch index being analyzed at delivery time t, or None if idle."""
        if self.busy_fn is not None:
            return self.busy_fn()
        if t < self._busy_until:
            return self._busy_epoch
        return None

    # -- ingestion -------------------------------------------------------------

    def ingest(self, sample_index: int, row: np.ndarray, t: float) -> Optional[EpochEvent]:
        events = self.ingest_block(np.array([sample_index], dtype=np.int64),
                                   np.asarray(row, dtype=np.int16).reshape(1, -1),
                                   np.array([t], dtype=float))
        return events[0] if events else None

    def ingest_block(self, indices: np.ndarray, raw: np.ndarray,
                     times: np.ndarray) -> List[EpochEvent]:
        """Apply ordering, policy, and epoch assembly to a delivery batch.

        ``times`` are session-relative delivery seconds, non-decreasing.
        Returns the EpochEvents completed by this batch, in order.
        """
        indices = np.asarray(indices, dtype=np.int64)
        raw = np.asarray(raw, dtype=np.int16)
        times = np.asarray(times, dtype=float)

        # Ordering: indices must be strictly increasing across the session.
        expected = np.concatenate(([self._last_index], indices[:-1]))
        bad = indices <= np.maximum.accumulate(expected)
        if bad.any():
            for i in np.flatnonzero(bad):
                self.order_errors.append({
                    "error": StreamOrderError.__name__,
                    "sample_index": int(indices[i]),
                    "t": float(times[i]),
                })
            self._count(times[bad], stored=False)
            keep = ~bad
            indices, raw, times = indices[keep], raw[keep], times[keep]
        if len(indices) == 0:
            return []
        self._last_index = int(indices[-1])

        events: List[EpochEvent] = []
        i, n = 0, len(indices)
        while i < n:
            target = self._analysis_target(times[i])
            if self.policy is Policy.DROP and target is not None:
                if self.busy_fn is not None:
                    j = n  # real analysis flag: whole batch arrived while busy
                else:
                    j = int(np.searchsorted(times, self._busy_until, side="left"))
                    j = max(j, i + 1)
                self.drop_log[target] = self.drop_log.get(target, 0) + (j - i)
                self._count(times[i:j], stored=False)
                i = j
                continue
            room = EPOCH_SAMPLES - self._fill
            j = min(n, i + room)
            self._buf[self._fill:self._fill + (j - i)] = raw[i:j]
            self._buf_indices[self._fill:self._fill + (j - i)] = indices[i:j]
            self._fill += j - i
            self._count(times[i:j], stored=True)
            if self.writer is not None:
                self.writer.write_rows(indices[i:j], raw[i:j])
            if self._fill == EPOCH_SAMPLES:
                events.append(self._complete(float(times[j - 1])))
            i = j
        return events

    def _complete(self, t: float) -> EpochEvent:
        first = int(self._buf_indices[0])
        epoch_index = first // EPOCH_SAMPLES
        raw = self._buf.copy()
        channels = {c: protocol.dequantize_channel(raw[:, int(c)], c) for c in self.channels}
        event = EpochEvent(Epoch(epoch_index, channels), first, raw, t)
        self._fill = 0
        self._epochs_emitted += 1
        if self.busy_fn is None and self.virtual_stall_s > 0:
            self._busy_until = t + self.virtual_stall_s
            self._busy_epoch = epoch_index
        return event

    # -- session edges -----------------------------------------------------------

    def discard_partial(self) -> int:
        """Drop an incomplete epoch buffer (reconnects must not straddle epochs)."""
        n = self._fill
        if n:
            self.discarded_partials.append({"samples": n,
                                            "first_sample_index": int(self._buf_indices[0])})
            log.warning("discarding partial epoch buffer (%d samples)", n)
        self._fill = 0
        return n

    @property
    def epochs_emitted(self) -> int:
        return self._epochs_emitted

    def sample_log_rows(self) -> List[Tuple[int, int, int]]:
        return [(s, d, k) for s, (d, k) in sorted(self.per_second.items())]


# ---------------------------------------------------------------------------
# Analysis worker

class AnalysisWorker:
    """Runs per-epoch analysis off the ingestion thread.

    While an epoch is being analyzed, ``current()`` reports its index; the
    engine's DROP policy consults that through ``busy_fn``.
    """

    def __init__(self, callback: Callable[[EpochEvent], None],
                 budget_ms: float = DEFAULT_BUDGET_MS,
                 on_done: Optional[Callable[[EpochEvent], None]] = None):
        self.callback = callback
        self.budget_ms = budget_ms
        self.on_done = on_done
        self.warnings: List[str] = []
        self._queue: "queue.Queue[Optional[EpochEvent]]" = queue.Queue()
        self._current: Optional[int] = None
        self._thread = threading.Thread(target=self._run, name="epoch-analysis", daemon=True)
        self._thread.start()

    def submit(self, event: EpochEvent) -> None:
        self._queue.put(event)

    def current(self) -> Optional[int]:
        return self._current

    def close(self) -> None:
        self._queue.put(None)
        self._thread.join(timeout=30.0)

    def _run(self) -> None:
        while True:
            event = self._queue.get()
            if event is None:
                return
            self._current = event.epoch.epoch_index
            started = time.perf_counter()
            try:
                self.callback(event)
            except Exception:
                log.exception("epoch %d analysis failed", event.epoch.epoch_index)
            elapsed_ms = (time.perf_counter() - started) * 1000.0
            event.analysis_ms = elapsed_ms
            if elapsed_ms > self.budget_ms:
                event.budget_exceeded = True
                msg = (f"epoch {event.epoch.epoch_index} analysis took "
                       f"{elapsed_ms:.1f} ms (budget {self.budget_ms:.0f} ms)")
                self.warnings.append(msg)
                log.warning("%s", msg)
            self._current = None
            if self.on_done is not None:
                self.on_done(event)


# ---------------------------------------------------------------------------
# TCP client

class RecordingClient:
    """Connects to a frame server, records, analyzes, and writes output files.

    The scorer, when given, must provide ``score(epoch) -> (stage, confidence,
    probabilities)``. Additional per-epoch listeners can be registered with
    ``on_epoch``; they run on the analysis thread after attachments are set.
    """

    def __init__(self, out_dir: Path, policy: Policy = Policy.DROP,
                 channels: Sequence[ChannelId] = DEFAULT_CHANNELS,
                 scorer=None, budget_ms: float = DEFAULT_BUDGET_MS,
                 annotations=None, compute_spectra: bool = True):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.session_id = uuid.uuid4().hex[:12]
        self.start_wall = datetime.now(timezone.utc)
        self.policy = Policy(policy)
        self.channels = [ChannelId(c) for c in channels]
        self.scorer = scorer
        self.compute_spectra = compute_spectra
        self.annotations = (annotations if annotations is not None
                            else stimulation.AnnotationStore(self.session_id))
        self.events: List[EpochEvent] = []
        self.tfr_window: List[analysis.TFR] = []
        self._listeners: List[Callable[[EpochEvent], None]] = []
        self._block_listeners: List[Callable[[np.ndarray, np.ndarray], None]] = []

        self._writer = recfiles.RawTextWriter(self.out_dir / "raw.txt", self.channels)
        self._worker = AnalysisWorker(self._analyze, budget_ms, on_done=self._on_done)
        self.engine = StreamEngine(policy=self.policy, channels=self.channels,
                                   writer=self._writer, busy_fn=self._worker.current)
        self._sock: Optional[socket.socket] = None
        self._reader: Optional[threading.Thread] = None
        self._send_lock = threading.Lock()
        self._command_lock = threading.Lock()
        self._ack_queue: "queue.Queue[Tuple[int, int]]" = queue.Queue()
        self._ended = threading.Event()
        self._stop_reader = threading.Event()
        self._t0 = 0.0
        self._finalized = False

    # -- wiring -----------------------------------------------------------------

    def on_epoch(self, listener: Callable[[EpochEvent], None]) -> None:
        self._listeners.append(listener)

    def on_block(self, listener: Callable[[np.ndarray, np.ndarray], None]) -> None:
        """Register a ``(sample_indices, raw int16 block)`` tap.

        Runs on the reader thread after ingestion; keep it cheap.
        """
        self._block_listeners.append(listener)

    def _analyze(self, event: EpochEvent) -> None:
        if self.compute_spectra:
            event.spectrum = analysis.periodogram(event.epoch)
            event.tfr = analysis.tfr_epoch(event.epoch)
            self.tfr_window.append(event.tfr)
            del self.tfr_window[:-4]
        if self.scorer is not None:
            event.prediction = self.scorer.score(event.epoch)

    def _on_done(self, event: EpochEvent) -> None:
        self.events.append(event)
        for listener in self._listeners:
            try:
                listener(event)
            except Exception:
                log.exception("epoch listener failed")

    # -- connection ----------------------------------------------------------------

    def connect(self, host: str, port: int, timeout: float = 5.0) -> None:
        # Epochs never straddle reconnects; any partial buffer is logged and dropped.
        self.engine.discard_partial()
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectError(f"cannot reach {host}:{port}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(timeout)
        hello = protocol.message_to_bytes(protocol.encode_hello(self.channels))
        self._sock.sendall(hello)
        try:
            msg = _read_message(self._sock)
        except (OSError, EOFError) as exc:
            raise ConnectError(f"no handshake reply from {host}:{port}") from exc
        status, _ = protocol.decode_ack(msg)
        if status != protocol.ACK_OK:
            raise ConnectError(f"server refused session (status {status})")
        self._sock.settimeout(0.5)
        self._t0 = time.perf_counter()
        self._ended.clear()
        self._stop_reader.clear()
        self._reader = threading.Thread(target=self._read_loop, name="frame-reader",
                                        daemon=True)
        self._reader.start()

    def _now(self) -> float:
        return time.perf_counter() - self._t0

    def _read_loop(self) -> None:
        # Keeps parsing past END_OF_STREAM so acknowledgements sent late by
        # the server still reach their waiters; exits on close or stop().
        buf = bytearray()
        sock = self._sock
        while not self._stop_reader.is_set():
            try:
                chunk = sock.recv(1 << 16)
            except socket.timeout:
                continue
            except OSError:
                break
            if not chunk:
                break
            buf.extend(chunk)
            try:
                self._dispatch(buf)
            except Exception:
                log.exception("stream parse error; stopping reader")
                break
        self.engine.ended = True
        self._ended.set()

    def _dispatch(self, buf: bytearray) -> None:
        while len(buf) >= protocol.HEADER_SIZE:
            magic, kind, _ver, plen = struct.unpack_from("<HBBH", buf, 0)
            total = protocol.HEADER_SIZE + plen + 2
            if kind == MessageKind.DATA_FRAME and magic == protocol.MAGIC:
                run = self._frame_run_length(buf)
                if run == 0:
                    return  # first frame incomplete
                block = bytes(buf[:run * protocol.FRAME_RECORD_SIZE])
                del buf[:run * protocol.FRAME_RECORD_SIZE]
                indices, raw = protocol.decode_frames_bulk(block)
                t = self._now()
                events = self.engine.ingest_block(indices, raw,
                                                  np.full(len(indices), t))
                for event in events:
                    self._worker.submit(event)
                for listener in self._block_listeners:
                    try:
                        listener(indices, raw)
                    except Exception:
                        log.exception("block listener failed")
                continue
            if len(buf) < total:
                return
            msg = protocol.decode_message(bytes(buf[:total]))
            del buf[:total]
            if msg.kind is MessageKind.ACK:
                self._ack_queue.put(protocol.decode_ack(msg))
            elif msg.kind is MessageKind.SESSION_CTRL:
                op, _ = protocol.decode_session_ctrl(msg)
                if op is protocol.SessionCtrl.END_OF_STREAM:
                    self.engine.ended = True
                    self._ended.set()

    @staticmethod
    def _frame_run_length(buf: bytearray) -> int:
        """Number of complete consecutive DATA_FRAME records at the head."""
        size = protocol.FRAME_RECORD_SIZE
        run = 0
        offset = 0
        while len(buf) - offset >= size:
            magic, kind = struct.unpack_from("<HB", buf, offset)
            if magic != protocol.MAGIC or kind != MessageKind.DATA_FRAME:
                break
            run += 1
            offset += size
        return run

    # -- commands --------------------------------------------------------------------

    def send_stimulus(self, spec: StimulusSpec, timeout: float = 5.0) -> Tuple[int, int]:
        """Send a stimulation command; returns (status, device sample_index)."""
        if self._sock is None:
            raise ConnectError("not connected")
        payload = protocol.message_to_bytes(protocol.encode_stimulus(spec))
        with self._command_lock:
            with self._send_lock:
                self._sock.sendall(payload)
            try:
                return self._ack_queue.get(timeout=timeout)
            except queue.Empty:
                raise ConnectError("no acknowledgement from server") from None

    @property
    def samples_received(self) -> int:
        return self.engine.total_delivered

    @property
    def is_streaming(self) -> bool:
        return self._sock is not None and not self._ended.is_set()

    def trigger(self, spec: StimulusSpec):
        return stimulation.trigger(self, spec)

    def annotate(self, label: str):
        return stimulation.annotate(self, label)

    # -- lifecycle ----------------------------------------------------------------------

    def wait(self, timeout: Optional[float] = None) -> bool:
        """Block until the server ends the stream (or timeout); True if ended."""
        return self._ended.wait(timeout)

    def stop(self) -> None:
        self._ended.set()
        self._stop_reader.set()
        if self._reader is not None:
            self._reader.join(timeout=10.0)
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
        self._worker.close()

    def finalize(self) -> Dict[str, Path]:
        """Write raw, scoring, annotations, per-second log, and session metadata."""
        if self._finalized:
            raise FinalizeError("session already finalized", written=[])
        self.stop()
        self._finalized = True
        written: List[Path] = []
        try:
            self._writer.close()
            written.append(self._writer.path)

            scoring_path = self.out_dir / "scoring.txt"
            rows = [(e.epoch.epoch_index, e.prediction[0], float(e.prediction[1]))
                    for e in self.events if e.prediction is not None]
            recfiles.write_scoring_txt(scoring_path, rows)
            written.append(scoring_path)

            ann_path = self.out_dir / "annotations.json"
            self.annotations.export_json(ann_path)
            written.append(ann_path)

            log_path = self.out_dir / "sample_log.csv"
            recfiles.write_sample_log(log_path, self.engine.sample_log_rows())
            written.append(log_path)

            session_path = self.out_dir / "session.json"
            with open(session_path, "w", encoding="utf-8") as fh:
                json.dump(self.session_meta(), fh, indent=1)
            written.append(session_path)
        except OSError as exc:
            raise FinalizeError(f"output write failed: {exc}", written=written) from exc
        return {p.name: p for p in written}

    def session_meta(self) -> dict:
        return {
            "session_id": self.session_id,
            "start_wall": self.start_wall.isoformat(),
            "policy": self.policy.value,
            "channels": [c.name for c in self.channels],
            "epochs": self.engine.epochs_emitted,
            "samples_delivered": self.engine.total_delivered,
            "samples_stored": self.engine.total_stored,
            "drops_by_epoch": {str(k): v for k, v in sorted(self.engine.drop_log.items())},
            "order_errors": self.engine.order_errors,
            "discarded_partials": self.engine.discarded_partials,
            "warnings": list(self._worker.warnings),
        }

    def __enter__(self) -> "RecordingClient":
        return self

    def __exit__(self, *exc) -> None:
        if not self._finalized:
            self.stop()


def _read_message(sock: socket.socket) -> protocol.WireMessage:
    head = _read_exact(sock, protocol.HEADER_SIZE)
    _magic, _kind, _ver, plen = struct.unpack("<HBBH", head)
    rest = _read_exact(sock, plen + 2)
    return protocol.decode_message(head + rest)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EOFError("connection closed during read")
        buf.extend(chunk)
    return bytes(buf)


def record_session(host: str, port: int, out_dir: Path, policy: Policy = Policy.DROP,
                   channels: Sequence[ChannelId] = DEFAULT_CHANNELS, scorer=None,
                   duration_s: Optional[float] = None) -> RecordingClient:
    """Run a complete recording session and finalize its files."""
    client = RecordingClient(out_dir, policy=policy, channels=channels, scorer=scorer)
    client.connect(host, port)
    client.wait(duration_s)
    client.finalize()
    return client
