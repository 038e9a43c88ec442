"""HTTP and push-channel surface for live sessions and exported results.

The gateway owns at most one live session at a time: a simulated headband
plus a recording client. Live signal goes out over a WebSocket as
peak-preserving min/max bins at the display rate, so transients survive
decimation; epoch results are pushed on completion in arrival order. Slow
consumers are disconnected rather than allowed to back-pressure the
recording path.
"""

from __future__ import annotations

import asyncio
import json
import logging
import re
import threading
from contextlib import asynccontextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from . import analysis, offline, simulator, stimulation
from .acquisition import Policy, RecordingClient
from .core import SAMPLE_RATE_HZ, STAGE_ORDER, SleepStage
from .errors import (ConnectError, SomnoloopError, StimulusError,
                     ValidationError)
from .protocol import (CHANNEL_ORDER, ChannelId, dequantize_channel,
                       stimulus_from_dict, stimulus_to_dict)
from .scoring import RealtimeScorer

log = logging.getLogger(__name__)

DISPLAY_RATE_HZ = 64
DECIMATION = SAMPLE_RATE_HZ // DISPLAY_RATE_HZ          # raw samples per bin
BATCH_BINS = 16                                         # 250 ms per batch
CLIENT_QUEUE_LIMIT = 256
DEFAULT_STREAM_CHANNELS = (ChannelId.EEG_L, ChannelId.EEG_R)

_SAFE_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


def minmax_decimate(x: np.ndarray, factor: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-bin min and max over consecutive ``factor``-sample bins."""
    n = (len(x) // factor) * factor
    blocks = x[:n].reshape(-1, factor)
    return blocks.min(axis=1), blocks.max(axis=1)


class LiveHub:
    """Fan-out of JSON messages to every connected live client.

    publish() is callable from any thread; messages are serialized once and
    queued per client. A client whose queue fills is disconnected.
    """

    def __init__(self) -> None:
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._clients: Dict[asyncio.Queue, WebSocket] = {}
        self._lock = threading.Lock()

    def bind(self, loop: asyncio.AbstractEventLoop) -> None:
        self._loop = loop

    def register(self, ws: WebSocket) -> asyncio.Queue:
        q: asyncio.Queue = asyncio.Queue(maxsize=CLIENT_QUEUE_LIMIT)
        with self._lock:
            self._clients[q] = ws
        return q

    def unregister(self, q: asyncio.Queue) -> None:
        with self._lock:
            self._clients.pop(q, None)

    @property
    def n_clients(self) -> int:
        with self._lock:
            return len(self._clients)

    def publish(self, message: dict) -> None:
        loop = self._loop
        if loop is None or loop.is_closed():
            return
        text = json.dumps(message)
        try:
            loop.call_soon_threadsafe(self._fan_out, text)
        except RuntimeError:
            pass  # loop shut down between the check and the call

    def _fan_out(self, text: str) -> None:
        with self._lock:
            targets = list(self._clients.items())
        for q, ws in targets:
            try:
                q.put_nowait(text)
            except asyncio.QueueFull:
                log.warning("disconnecting slow live client")
                self.unregister(q)
                asyncio.ensure_future(_close_quietly(ws))


async def _close_quietly(ws: WebSocket) -> None:
    try:
        await ws.close(code=1013)
    except Exception:
        pass


class FrameFanout:
    """Accumulates raw blocks and emits min/max display batches."""

    def __init__(self, hub: LiveHub, channels=DEFAULT_STREAM_CHANNELS) -> None:
        self.hub = hub
        self.channels = tuple(ChannelId(c) for c in channels)
        self._cols = [CHANNEL_ORDER.index(c) for c in self.channels]
        self._buf: List[np.ndarray] = []
        self._buffered = 0
        self._first_index: Optional[int] = None
        self._batch_raw = BATCH_BINS * DECIMATION

    def __call__(self, indices: np.ndarray, raw: np.ndarray) -> None:
        if self._first_index is None:
            self._first_index = int(indices[0])
        self._buf.append(raw)
        self._buffered += len(raw)
        while self._buffered >= self._batch_raw:
            block = np.vstack(self._buf)
            chunk, rest = block[:self._batch_raw], block[self._batch_raw:]
            self._buf = [rest] if len(rest) else []
            self._buffered = len(rest)
            first = self._first_index
            self._first_index = first + self._batch_raw
            self.hub.publish(self._batch_message(first, chunk))

    def _batch_message(self, first_index: int, chunk: np.ndarray) -> dict:
        channels = {}
        for cid, col in zip(self.channels, self._cols):
            phys = dequantize_channel(chunk[:, col], cid)
            mins, maxs = minmax_decimate(phys, DECIMATION)
            channels[cid.name] = {"min": np.round(mins, 3).tolist(),
                                  "max": np.round(maxs, 3).tolist()}
        return {"type": "frames", "first_sample_index": int(first_index),
                "decimation": DECIMATION, "display_rate_hz": DISPLAY_RATE_HZ,
                "channels": channels}


def _epoch_message(event) -> dict:
    stage = confidences = None
    if event.prediction is not None:
        pred_stage, _conf, probs = event.prediction
        stage = pred_stage.name
        confidences = {s.name: round(float(p), 6)
                       for s, p in zip(STAGE_ORDER, probs)}
    bands = None
    if event.spectrum is not None:
        bands = {name: {"power": round(v["power"], 6),
                        "relative": round(v["relative"], 6)}
                 for name, v in analysis.band_summary(event.spectrum).items()}
    index = event.epoch.epoch_index
    return {"type": "epoch", "epoch_index": index,
            "first_sample_index": int(event.first_sample_index),
            "stage": stage, "confidences": confidences, "bands": bands,
            "tfr_ref": f"/session/epoch/{index}/tfr",
            "dropped_after": event.dropped_after,
            "analysis_ms": event.analysis_ms,
            "budget_exceeded": event.budget_exceeded}


class SessionConfig(BaseModel):
    policy: str = "drop"
    schedule: List[Tuple[str, int]] = Field(default=[("N2", 4)])
    jitter: str = "none"
    seed: int = 0
    speed: float = 8.0
    model_file: Optional[str] = None
    out_dir: Optional[str] = None
    session_id: Optional[str] = None


class AnnotationBody(BaseModel):
    label: str


class SessionManager:
    """The single live session behind the HTTP surface."""

    def __init__(self, data_root: Path, hub: LiveHub) -> None:
        self.data_root = Path(data_root)
        self.hub = hub
        self.state = "idle"
        self.session_id: Optional[str] = None
        self.client: Optional[RecordingClient] = None
        self.sim: Optional[simulator.HeadbandSimulator] = None
        self.written: List[str] = []
        self._lock = threading.Lock()

    def start(self, cfg: SessionConfig) -> dict:
        with self._lock:
            if self.state == "streaming":
                raise HTTPException(409, "a session is already streaming")
            try:
                policy = Policy[cfg.policy.upper()]
                jitter = simulator.JitterModel.parse(cfg.jitter)
                schedule = [(SleepStage[s.upper()], int(n))
                            for s, n in cfg.schedule]
            except (KeyError, ValidationError) as exc:
                raise HTTPException(422, f"bad session config: {exc}")
            scorer = None
            if cfg.model_file:
                try:
                    scorer = RealtimeScorer.from_file(cfg.model_file)
                except SomnoloopError as exc:
                    raise HTTPException(422, f"model: {exc}")

            session_id = cfg.session_id or datetime.now(timezone.utc).strftime(
                "%Y%m%dT%H%M%SZ")
            out_dir = Path(cfg.out_dir) if cfg.out_dir else (
                self.data_root / "sessions" / session_id)
            source = simulator.SyntheticSource(schedule, seed=cfg.seed)
            sim = simulator.serve(source, jitter=jitter, speed=cfg.speed)
            client = RecordingClient(out_dir, policy=policy, scorer=scorer)
            client.on_block(FrameFanout(self.hub))
            client.on_epoch(lambda e: self.hub.publish(_epoch_message(e)))
            try:
                client.connect(*sim.address)
            except ConnectError as exc:
                sim.stop()
                raise HTTPException(502, f"simulator connect failed: {exc}")
            self.sim, self.client = sim, client
            self.session_id, self.state = session_id, "streaming"
            self.written = []
            self.hub.publish({"type": "status", "state": "streaming",
                              "session_id": session_id})
            return self.status()

    def stop(self) -> dict:
        with self._lock:
            if self.state != "streaming":
                raise HTTPException(409, "no session is streaming")
            client, sim = self.client, self.sim
            self.state = "stopped"
        try:
            written = client.finalize()
            self.written = [str(p) for p in written.values()]
        finally:
            if sim is not None:
                sim.stop()
        self.hub.publish({"type": "status", "state": "stopped",
                          "session_id": self.session_id})
        return {"session_id": self.session_id, "written": self.written}

    def status(self) -> dict:
        client = self.client
        out = {"state": self.state, "session_id": self.session_id,
               "live_clients": self.hub.n_clients}
        if client is not None:
            delivered = client.engine.total_delivered
            stored = client.engine.total_stored
            out.update({
                "samples_received": client.samples_received,
                "epochs_completed": len(client.events),
                "streaming": client.is_streaming,
                "delivered": delivered,
                "stored": stored,
                "dropped": delivered - stored,
            })
        if self.written:
            out["written"] = self.written
        return out

    def require_client(self) -> RecordingClient:
        if self.client is None or self.state != "streaming":
            raise HTTPException(409, "no session is streaming")
        return self.client

    def shutdown(self) -> None:
        with self._lock:
            client, sim = self.client, self.sim
            self.client = self.sim = None
            self.state = "idle"
        if client is not None:
            try:
                client.stop()
            except Exception:
                log.exception("client stop failed during shutdown")
        if sim is not None:
            sim.stop()


def _safe_segment(value: str, what: str) -> str:
    if not _SAFE_NAME.match(value):
        raise HTTPException(400, f"invalid {what}")
    return value


def create_app(data_root: Path = Path("somnoloop-data"),
               frontend_dir: Optional[Path] = None) -> FastAPI:
    """Assemble the service; ``frontend_dir`` mounts built UI assets at /."""
    data_root = Path(data_root)
    hub = LiveHub()
    manager = SessionManager(data_root, hub)

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        hub.bind(asyncio.get_running_loop())
        yield
        manager.shutdown()

    app = FastAPI(title="somnoloop gateway", lifespan=lifespan)
    app.state.manager = manager
    app.state.hub = hub
    offline_cache: Dict[str, offline.IntegratedRecording] = {}

    # -- session lifecycle --------------------------------------------------

    @app.get("/session")
    def session_status() -> dict:
        return manager.status()

    @app.post("/session")
    def session_start(cfg: SessionConfig) -> dict:
        return manager.start(cfg)

    @app.delete("/session")
    def session_stop() -> dict:
        return manager.stop()

    @app.get("/session/epoch/{index}")
    def session_epoch(index: int) -> dict:
        client = manager.require_client()
        for event in client.events:
            if event.epoch.epoch_index == index:
                return _epoch_message(event)
        raise HTTPException(404, f"epoch {index} not completed")

    @app.get("/session/epoch/{index}/tfr")
    def session_epoch_tfr(index: int) -> dict:
        client = manager.require_client()
        for event in client.events:
            if event.epoch.epoch_index == index and event.tfr is not None:
                return {"times": event.tfr.times.tolist(),
                        "frequencies": event.tfr.frequencies.tolist(),
                        "power": event.tfr.power.tolist()}
        raise HTTPException(404, f"no TFR for epoch {index}")

    @app.get("/session/commands")
    def session_commands() -> List[dict]:
        if manager.sim is None:
            raise HTTPException(409, "no session has run")
        return [{"receipt_ms": e.receipt_ms, "sample_index": e.sample_index,
                 "spec": stimulus_to_dict(e.spec)}
                for e in list(manager.sim.command_log)]

    # -- commands -------------------------------------------------------------

    @app.post("/stimulus")
    def post_stimulus(body: dict) -> dict:
        client = manager.require_client()
        try:
            spec = stimulus_from_dict(body)
        except (ValidationError, KeyError, TypeError, ValueError) as exc:
            raise HTTPException(422, f"invalid stimulus: {exc}")
        try:
            annotation = stimulation.trigger(client, spec)
        except StimulusError as exc:
            raise HTTPException(502, f"stimulus failed: {exc}")
        return annotation.to_dict()

    @app.post("/annotation")
    def post_annotation(body: AnnotationBody) -> dict:
        client = manager.require_client()
        try:
            annotation = stimulation.annotate(client, body.label)
        except ValidationError as exc:
            raise HTTPException(422, str(exc))
        except StimulusError as exc:
            raise HTTPException(409, str(exc))
        return annotation.to_dict()

    # -- exported sessions ----------------------------------------------------

    def _offline_dir(session: str) -> Path:
        d = data_root / "offline" / _safe_segment(session, "session id")
        if not (d / offline.MANIFEST_NAME).exists():
            raise HTTPException(404, f"no exported session {session!r}")
        return d

    def _offline_rec(session: str) -> offline.IntegratedRecording:
        if session not in offline_cache:
            offline_cache[session] = offline.import_session(_offline_dir(session))
        return offline_cache[session]

    @app.get("/offline")
    def offline_list() -> List[dict]:
        root = data_root / "offline"
        out = []
        if root.is_dir():
            for d in sorted(root.iterdir()):
                man = d / offline.MANIFEST_NAME
                if man.exists():
                    meta = json.loads(man.read_text())
                    out.append({"id": d.name,
                                "n_epochs": meta.get("n_epochs"),
                                "decision_path": meta.get("decision_path"),
                                "created": meta.get("created")})
        return out

    @app.get("/offline/{session}/manifest")
    def offline_manifest(session: str) -> dict:
        return json.loads((_offline_dir(session) / offline.MANIFEST_NAME).read_text())

    @app.get("/offline/{session}/file/{name}")
    def offline_file(session: str, name: str) -> FileResponse:
        d = _offline_dir(session)
        path = d / _safe_segment(name, "file name")
        if not path.is_file():
            raise HTTPException(404, f"no file {name!r}")
        return FileResponse(path)

    @app.get("/offline/{session}/hypnogram")
    def offline_hypnogram(session: str) -> dict:
        rec = _offline_rec(session)
        if rec.hypnogram is None:
            raise HTTPException(404, "session has no hypnogram")
        hyp = rec.hypnogram
        return {"epoch_indices": [int(i) for i in hyp.epoch_indices],
                "stages": [s.name for s in hyp.stages],
                "confidences": np.round(hyp.confidences, 6).tolist()}

    @app.get("/offline/{session}/epoch/{index}")
    def offline_epoch(session: str, index: int) -> dict:
        rec = _offline_rec(session)
        try:
            view = offline.get_epoch(rec, index)
        except SomnoloopError as exc:
            raise HTTPException(404, str(exc))
        channels = {}
        for name, arr in view.channels.items():
            mins, maxs = minmax_decimate(np.asarray(arr, dtype=np.float64),
                                         DECIMATION)
            channels[name] = {"min": np.round(mins, 3).tolist(),
                              "max": np.round(maxs, 3).tolist()}
        return {"epoch_index": index, "n_epochs": rec.n_epochs,
                "first_sample_index": view.first_sample_index,
                "display_rate_hz": DISPLAY_RATE_HZ,
                "stage": view.stage.name if view.stage is not None else None,
                "channels": channels,
                "annotations": [a.to_dict() for a in view.annotations],
                "tfr": {"times": view.tfr.times.tolist(),
                        "frequencies": view.tfr.frequencies.tolist(),
                        "power": view.tfr.power.tolist()}}

    # -- live push channel ------------------------------------------------------

    @app.websocket("/live")
    async def live(ws: WebSocket) -> None:
        await ws.accept()
        q = hub.register(ws)
        await ws.send_text(json.dumps({"type": "hello",
                                       **manager.status()}))
        try:
            while True:
                text = await q.get()
                await ws.send_text(text)
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            hub.unregister(q)

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True),
                  name="ui")

    return app


def serve_gateway(host: str = "127.0.0.1", port: int = 8765,
                  data_root: Path = Path("somnoloop-data"),
                  frontend_dir: Optional[Path] = None) -> None:
    """Blocking uvicorn server around create_app."""
    import uvicorn

    app = create_app(data_root, frontend_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
