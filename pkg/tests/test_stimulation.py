"""Annotation store semantics and stimulus triggering."""

import numpy as np
import pytest

from somnoloop import stimulation
from somnoloop.acquisition import RecordingClient
from somnoloop.core import SleepStage
from somnoloop.errors import (
    ConnectError,
    DataError,
    LoadError,
    StimulusError,
    ValidationError,
)
from somnoloop.protocol import ACK_OK, Modality, StimulusSpec
from somnoloop.simulator import JitterModel, SyntheticSource, serve
from somnoloop.stimulation import (
    KIND_MANUAL,
    KIND_STIMULUS,
    MANUAL_PALETTE,
    MODALITY_COLORS,
    Annotation,
    AnnotationStore,
    annotate,
    export_annotations,
    import_annotations,
    trigger,
)


def test_annotation_dict_round_trip():
    spec = StimulusSpec.visual()
    ann = Annotation(sample_index=512, timestamp="2026-08-16T00:00:00+00:00",
                     kind=KIND_STIMULUS, label="VISUAL", code=0,
                     color=MODALITY_COLORS[Modality.VISUAL], spec=spec,
                     failed=False, roundtrip_ms=1.25)
    assert Annotation.from_dict(ann.to_dict()) == ann
    manual = Annotation(sample_index=0, timestamp="t", kind=KIND_MANUAL,
                        label="lights off", code=1, color=MANUAL_PALETTE[1])
    assert Annotation.from_dict(manual.to_dict()) == manual


def test_store_orders_and_codes():
    store = AnnotationStore("s1")
    store.append(KIND_MANUAL, "first", 100)
    store.append(KIND_MANUAL, "second", 50)      # raced counter: clamped forward
    store.append(KIND_MANUAL, "third", 700)
    items = store.items()
    assert [a.sample_index for a in items] == [100, 100, 700]
    assert [a.code for a in items] == [0, 1, 2]
    indices = [a.sample_index for a in items]
    assert indices == sorted(indices)


def test_store_colors():
    store = AnnotationStore()
    for i in range(len(MANUAL_PALETTE) + 2):
        store.append(KIND_MANUAL, f"m{i}", i)
    colors = [a.color for a in store]
    assert colors[:len(MANUAL_PALETTE)] == MANUAL_PALETTE
    assert colors[len(MANUAL_PALETTE)] == MANUAL_PALETTE[0]

    stim = AnnotationStore()
    red = stim.append(KIND_STIMULUS, "v", 0, spec=StimulusSpec.visual())
    blue = stim.append(KIND_STIMULUS, "a", 1, spec=StimulusSpec.auditory())
    green = stim.append(KIND_STIMULUS, "t", 2, spec=StimulusSpec.tactile())
    assert red.color == "#d62728"
    assert blue.color == "#1f77b4"
    assert green.color == "#2ca02c"


def test_store_validation_and_finalize():
    store = AnnotationStore()
    with pytest.raises(ValidationError):
        store.append(KIND_STIMULUS, "no spec", 0)
    store.append(KIND_MANUAL, "ok", 0)
    store.finalize()
    with pytest.raises(DataError):
        store.append(KIND_MANUAL, "late", 1)
    assert len(store) == 1


def test_store_shift_for_alignment():
    store = AnnotationStore("night")
    store.append(KIND_MANUAL, "a", 1000)
    store.append(KIND_MANUAL, "b", 2000)
    shifted = store.shift_sample_indices(896)
    assert [a.sample_index for a in shifted] == [1896, 2896]
    assert [a.sample_index for a in store] == [1000, 2000]
    assert shifted.session_id == "night"
    assert shifted != store
    assert store.shift_sample_indices(0) == store


def test_store_json_round_trip(tmp_path):
    store = AnnotationStore("rt")
    store.append(KIND_STIMULUS, "VISUAL", 256, spec=StimulusSpec.visual(),
                 roundtrip_ms=2.5)
    store.append(KIND_MANUAL, "note", 512)
    store.append(KIND_STIMULUS, "AUDITORY", 768, spec=StimulusSpec.auditory(),
                 failed=True)
    path = export_annotations(store, tmp_path / "annotations.json")
    back = import_annotations(path)
    assert back == store
    assert back.items()[2].failed


def test_import_failures(tmp_path):
    with pytest.raises(LoadError):
        import_annotations(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(LoadError):
        import_annotations(bad)
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    with pytest.raises(LoadError):
        import_annotations(empty)


# ---------------------------------------------------------------------------
# trigger / annotate against a scripted session

class FakeSession:
    def __init__(self, status=ACK_OK, raises=None, streaming=True):
        self.annotations = AnnotationStore("fake")
        self.samples_received = 12800
        self.is_streaming = streaming
        self._status = status
        self._raises = raises

    def send_stimulus(self, spec, timeout=5.0):
        if self._raises:
            raise self._raises
        return self._status, self.samples_received


def test_trigger_records_marker():
    session = FakeSession()
    spec = StimulusSpec.tactile(strength=80)
    ann = trigger(session, spec)
    assert ann.kind == KIND_STIMULUS
    assert ann.spec == spec
    assert ann.sample_index == 12800
    assert ann.roundtrip_ms is not None and ann.roundtrip_ms >= 0.0
    assert not ann.failed


def test_trigger_failures_stay_in_audit_trail():
    nack = FakeSession(status=3)
    with pytest.raises(StimulusError):
        trigger(nack, StimulusSpec.visual())
    assert len(nack.annotations) == 1
    assert nack.annotations.items()[0].failed

    dead = FakeSession(raises=ConnectError("gone"))
    with pytest.raises(StimulusError):
        trigger(dead, StimulusSpec.auditory())
    assert dead.annotations.items()[0].failed
    assert dead.annotations.items()[0].roundtrip_ms is None


def test_trigger_validation():
    session = FakeSession()
    with pytest.raises(ValidationError):
        trigger(session, StimulusSpec.visual(intensity=500))
    assert len(session.annotations) == 0
    idle = FakeSession(streaming=False)
    with pytest.raises(StimulusError):
        trigger(idle, StimulusSpec.visual())


def test_annotate_manual():
    session = FakeSession()
    ann = annotate(session, "body turn")
    assert ann.kind == KIND_MANUAL
    assert ann.label == "body turn"
    with pytest.raises(ValidationError):
        annotate(session, "   ")
    with pytest.raises(StimulusError):
        annotate(FakeSession(streaming=False), "x")


def test_trigger_against_live_simulator(tmp_path):
    source = SyntheticSource([(SleepStage.N2, 1)], seed=3)
    with serve(source, JitterModel("none"), port=0, speed=16.0) as srv:
        client = RecordingClient(tmp_path / "session", policy="buffer")
        client.connect("127.0.0.1", srv.port)
        try:
            spec = StimulusSpec.visual(blink_count=2)
            ann = client.trigger(spec)
            note = client.annotate("mid-run note")
        finally:
            client.wait(timeout=30.0)
            client.finalize()
    assert ann.spec == spec
    assert not ann.failed
    assert ann.roundtrip_ms is not None
    assert note.kind == KIND_MANUAL
    log = srv.command_log
    assert len(log) == 1
    assert log[0].spec == spec
    recorded = import_annotations(tmp_path / "session" / "annotations.json")
    assert spec in [a.spec for a in recorded]
