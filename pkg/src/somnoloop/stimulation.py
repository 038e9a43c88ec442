"""Stimulus triggering and the session annotation store.

Manual labels and automatic stimulation markers share one append-only,
sample-index-ordered store. Stimulation markers render in fixed colors
(visual red, auditory blue, tactile green); manual annotations draw from a
deterministic palette keyed by their display code. Failed stimuli are kept,
flagged, so the audit trail stays complete.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from . import protocol
from .errors import ConnectError, DataError, ExportError, LoadError, StimulusError, ValidationError
from .protocol import ACK_OK, Modality, StimulusSpec

KIND_MANUAL = "MANUAL"
KIND_STIMULUS = "STIMULUS"

MODALITY_COLORS = {
    Modality.VISUAL: "#d62728",     # red
    Modality.AUDITORY: "#1f77b4",   # blue
    Modality.TACTILE: "#2ca02c",    # green
    Modality.AUDIO_CUE: "#9467bd",
}

# Deterministic palette for manual annotations, cycled by display code.
MANUAL_PALETTE = ["#e377c2", "#8c564b", "#ff7f0e", "#17becf", "#bcbd22",
                  "#7f7f7f", "#aec7e8", "#98df8a"]


@dataclass(frozen=True)
class Annotation:
    sample_index: int
    timestamp: str                     # wall clock, ISO-8601
    kind: str                          # MANUAL | STIMULUS
    label: str
    code: int                          # unique per session, drives display color
    color: str
    spec: Optional[StimulusSpec] = None
    failed: bool = False
    roundtrip_ms: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "sample_index": self.sample_index,
            "timestamp": self.timestamp,
            "kind": self.kind,
            "label": self.label,
            "code": self.code,
            "color": self.color,
            "spec": protocol.stimulus_to_dict(self.spec) if self.spec else None,
            "failed": self.failed,
            "roundtrip_ms": self.roundtrip_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Annotation":
        return cls(
            sample_index=int(d["sample_index"]),
            timestamp=d["timestamp"],
            kind=d["kind"],
            label=d["label"],
            code=int(d["code"]),
            color=d["color"],
            spec=protocol.stimulus_from_dict(d["spec"]) if d.get("spec") else None,
            failed=bool(d.get("failed", False)),
            roundtrip_ms=d.get("roundtrip_ms"),
        )


class AnnotationStore:
    """Append-only, ordered by sample index, safe for concurrent appends."""

    def __init__(self, session_id: str = ""):
        self.session_id = session_id
        self._lock = threading.Lock()
        self._items: List[Annotation] = []
        self._finalized = False

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self.items())

    def __eq__(self, other) -> bool:
        return isinstance(other, AnnotationStore) and self.items() == other.items()

    def items(self) -> List[Annotation]:
        with self._lock:
            return list(self._items)

    def append(self, kind: str, label: str, sample_index: int,
               spec: Optional[StimulusSpec] = None, failed: bool = False,
               roundtrip_ms: Optional[float] = None,
               timestamp: Optional[str] = None) -> Annotation:
        if kind == KIND_STIMULUS and spec is None:
            raise ValidationError("spec")
        with self._lock:
            if self._finalized:
                raise DataError("annotation store is finalized")
            code = len(self._items)
            if self._items:
                # concurrent appenders may race the sample counter; keep order
                sample_index = max(sample_index, self._items[-1].sample_index)
            if spec is not None:
                color = MODALITY_COLORS[spec.modality]
            else:
                color = MANUAL_PALETTE[code % len(MANUAL_PALETTE)]
            ann = Annotation(
                sample_index=sample_index,
                timestamp=timestamp or datetime.now(timezone.utc).isoformat(),
                kind=kind, label=label, code=code, color=color,
                spec=spec, failed=failed, roundtrip_ms=roundtrip_ms,
            )
            self._items.append(ann)
            return ann

    def finalize(self) -> None:
        with self._lock:
            self._finalized = True

    def shift_sample_indices(self, offset: int) -> "AnnotationStore":
        """New store with every sample index moved by ``offset`` (for alignment)."""
        out = AnnotationStore(self.session_id)
        out._items = [replace(a, sample_index=a.sample_index + offset)
                      for a in self.items()]
        return out

    # -- persistence -----------------------------------------------------------

    def export_json(self, path: Path) -> None:
        doc = {
            "session_id": self.session_id,
            "exported": datetime.now(timezone.utc).isoformat(),
            "annotations": [a.to_dict() for a in self.items()],
        }
        try:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(doc, fh, indent=1)
        except OSError as exc:
            raise ExportError(f"cannot write {path}: {exc}") from exc

    @classmethod
    def import_json(cls, path: Path) -> "AnnotationStore":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise LoadError(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}: invalid JSON: {exc}") from exc
        if "annotations" not in doc:
            raise LoadError(f"{path}: missing 'annotations' array")
        store = cls(doc.get("session_id", ""))
        store._items = [Annotation.from_dict(d) for d in doc["annotations"]]
        return store


def export_annotations(store: AnnotationStore, path: Path) -> Path:
    store.export_json(path)
    return Path(path)


def import_annotations(path: Path) -> AnnotationStore:
    return AnnotationStore.import_json(path)


# ---------------------------------------------------------------------------
# Session-facing operations

def trigger(session, spec: StimulusSpec) -> Annotation:
    """Send a stimulation command and record its marker.

    ``session`` is a streaming recording client. On acknowledgement the
    marker is stamped with the engine's current sample index and the
    measured command-to-ACK round trip. NACK and timeout leave a marker
    flagged as failed and raise StimulusError.
    """
    protocol.validate_stimulus(spec)
    if not getattr(session, "is_streaming", False):
        raise StimulusError("session is not streaming")
    label = spec.modality.name
    started = time.perf_counter()
    try:
        status, _device_index = session.send_stimulus(spec)
    except ConnectError as exc:
        session.annotations.append(KIND_STIMULUS, label, session.samples_received,
                                   spec=spec, failed=True)
        raise StimulusError(f"no acknowledgement: {exc}") from exc
    rt_ms = (time.perf_counter() - started) * 1000.0
    if status != ACK_OK:
        session.annotations.append(KIND_STIMULUS, label, session.samples_received,
                                   spec=spec, failed=True, roundtrip_ms=rt_ms)
        raise StimulusError(f"server rejected stimulus (status {status})")
    return session.annotations.append(KIND_STIMULUS, label, session.samples_received,
                                      spec=spec, roundtrip_ms=rt_ms)


def annotate(session, label: str) -> Annotation:
    """Record a manual annotation at the engine's current sample index."""
    if not isinstance(label, str) or not label.strip():
        raise ValidationError("label")
    if not getattr(session, "is_streaming", False):
        raise StimulusError("session is not streaming")
    return session.annotations.append(KIND_MANUAL, label, session.samples_received)
