"""Post-processing integration of recorded sessions.

Loads any combination of an engine session directory, a lossless device
recording, and an external EMG file; aligns them onto one master sample
clock; computes the full-night time-frequency matrix and hypnogram; and
exports everything as portable files with a checksum manifest.

When both an engine and a lossless recording exist, the lossless one
becomes the master signal and the engine's annotations are re-indexed onto
it via the estimated lag: annotations are sparse and cheap to move, the
signals are not, and the engine copy may be missing dropped samples.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import analysis, scoring, sync
from .analysis import TFR
from .core import EPOCH_SAMPLES, EPOCH_SECONDS, SAMPLE_RATE_HZ, Epoch, SleepStage
from .errors import DataError, ExportError, LoadError, RangeError, WeakEventError
from .protocol import CHANNEL_ORDER, ChannelId, dequantize_channel, quantize_channel
from .recfiles import (RawRecording, read_emg_csv, read_emg_txt,
                       read_hypnogram_csv, read_raw_txt, write_hypnogram_csv,
                       write_tfr_bin, read_tfr_bin)
from .scoring import Hypnogram, ScorerModel
from .stimulation import (KIND_STIMULUS, AnnotationStore, import_annotations)

MANIFEST_NAME = "manifest.json"
CHANNELS_CSV = "channels.csv"
HYPNOGRAM_CSV = "hypnogram.csv"
ANNOTATIONS_JSON = "annotations.json"
TFR_BIN = "tfr.bin"

# aligned-channel CSV print precision; EEG matches the raw format so the
# quantized values survive a round-trip, the rest are unit-scale floats
_CSV_FMT = {
    "EEG_L": "%.1f", "EEG_R": "%.1f",
    "TEMPERATURE": "%.2f",
}
_CSV_DEFAULT_FMT = "%.6f"


@dataclass
class EpochView:
    """All aligned channels of one epoch, plus its markers and spectra."""

    epoch_index: int
    channels: Dict[str, np.ndarray]
    tfr: TFR
    annotations: List = field(default_factory=list)
    stage: Optional[SleepStage] = None

    @property
    def first_sample_index(self) -> int:
        return self.epoch_index * EPOCH_SAMPLES


@dataclass
class IntegratedRecording:
    """Aligned multi-source recording on one master sample clock."""

    channels: Dict[str, np.ndarray]
    rate_hz: float
    annotations: AnnotationStore
    sync_results: List[sync.SyncResult] = field(default_factory=list)
    decision_path: str = ""
    sources: Dict[str, str] = field(default_factory=dict)
    hypnogram: Optional[Hypnogram] = None
    tfr: Optional[TFR] = None
    metadata: Dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(next(iter(self.channels.values()))) if self.channels else 0

    @property
    def n_epochs(self) -> int:
        return self.n_samples // EPOCH_SAMPLES

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.rate_hz

    @property
    def stimulation_markers(self) -> List:
        return [a for a in self.annotations if a.kind == KIND_STIMULUS]


# ---------------------------------------------------------------------------
# Integration

def _auto_window(len_a: int, len_b: int, rate: float) -> Tuple[float, float, float]:
    """Correlation window that fits both recordings, preferring defaults."""
    dur = min(len_a, len_b) / rate
    w_len = min(sync.DEFAULT_WINDOW_LEN_S, max(2.0, dur / 4.0))
    max_lag = min(sync.DEFAULT_MAX_LAG_S, max(1.0, (dur - w_len) / 2.0))
    start = min(sync.DEFAULT_WINDOW_START_S, max(0.0, (dur - w_len) / 2.0))
    return start, w_len, max_lag


def _bipolar(channels: Dict[str, np.ndarray]) -> Tuple[np.ndarray, str]:
    names = list(channels)
    if len(names) >= 2:
        return (np.asarray(channels[names[0]], dtype=np.float64)
                - np.asarray(channels[names[1]], dtype=np.float64),
                f"{names[0]}-{names[1]}")
    return np.asarray(channels[names[0]], dtype=np.float64), names[0]


def _place_on_master(signal_256: np.ndarray, lag_samples: int,
                     n_master: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Shift a common-rate signal onto the master clock, zero-padded.

    Master index m maps to source index m + lag; samples outside the source
    are zero and the covered [start, stop) range is reported.
    """
    out = np.zeros(n_master, dtype=np.float64)
    # master m <- source m + lag, valid while 0 <= m + lag < len(source)
    m_lo = max(0, -lag_samples)
    m_hi = min(n_master, len(signal_256) - lag_samples)
    if m_hi > m_lo:
        out[m_lo:m_hi] = signal_256[m_lo + lag_samples:m_hi + lag_samples]
        return out, (m_lo, m_hi)
    return out, (0, 0)


def integrate(engine: Optional[RawRecording] = None,
              lossless: Optional[RawRecording] = None,
              annotations: Optional[AnnotationStore] = None,
              emg: Optional[Dict[str, np.ndarray]] = None,
              emg_rate_hz: Optional[float] = None,
              emg_event_label: Optional[str] = None,
              manual_emg_times: Optional[Tuple[float, float]] = None,
              ) -> IntegratedRecording:
    """Merge loaded sources onto one master clock.

    The lossless recording wins as master when both EEG sources exist;
    engine annotations move onto it by the estimated lag. EMG alignment
    needs either an event annotation to correlate around or a manual pair
    of event times.
    """
    if engine is None and lossless is None:
        raise DataError("at least one EEG recording is required")

    store = annotations if annotations is not None else AnnotationStore()
    results: List[sync.SyncResult] = []
    metadata: Dict = {}

    if engine is not None and lossless is not None:
        a = engine.channel_physical(ChannelId.EEG_L)
        b = lossless.channel_physical(ChannelId.EEG_L)
        start, w_len, max_lag = _auto_window(len(a), len(b), SAMPLE_RATE_HZ)
        lag_result = sync.xcorr_lag(a, b, window_start_s=start,
                                    window_len_s=w_len, max_lag_s=max_lag)
        results.append(lag_result)
        # an event at engine sample s sits at lossless sample s + lag
        store = store.shift_sample_indices(lag_result.lag_samples)
        master, path = lossless, "engine+lossless"
        metadata["engine_reindexed_by"] = lag_result.lag_samples
    elif lossless is not None:
        master, path = lossless, "lossless-only"
    else:
        master, path = engine, "engine-only"

    channels = {ChannelId(c).name: master.channel_physical(ChannelId(c))
                for c in master.channels}
    n_master = master.n_samples

    if emg is not None:
        if emg_rate_hz is None:
            raise DataError("EMG needs a sample rate")
        bipolar, derivation = _bipolar(emg)
        metadata["emg_derivation"] = derivation
        if manual_emg_times is not None:
            t_eeg, t_emg = manual_emg_times
            emg_result = sync.sync_manual(t_eeg, t_emg,
                                          n_master / SAMPLE_RATE_HZ,
                                          len(bipolar) / emg_rate_hz)
        else:
            event = _find_event(store, emg_event_label)
            try:
                emg_result = sync.sync_emg_auto(
                    channels["EEG_L"], bipolar, emg_rate_hz,
                    event_sample_index=event.sample_index)
            except WeakEventError as exc:
                raise WeakEventError(
                    f"{exc}; rerun with manual event times "
                    "(--manual T_EEG T_EMG)") from exc
        results.append(emg_result)
        emg_256 = sync.resample_to(bipolar, emg_rate_hz, SAMPLE_RATE_HZ)
        aligned, covered = _place_on_master(emg_256, emg_result.lag_samples,
                                            n_master)
        channels["EMG"] = aligned
        metadata["emg_coverage"] = list(covered)
        path += "+emg"

    return IntegratedRecording(channels, float(SAMPLE_RATE_HZ), store,
                               results, path, metadata=metadata)


def _find_event(store: AnnotationStore, label: Optional[str]):
    if label:
        for a in store:
            if a.label == label:
                return a
        raise DataError(f"no annotation labelled {label!r}")
    for a in store:
        return a
    raise DataError("EMG alignment needs an event annotation "
                    "or manual event times")


def load_session(engine_dir: Optional[Path] = None,
                 lossless_path: Optional[Path] = None,
                 emg_path: Optional[Path] = None,
                 emg_rate_hz: Optional[float] = None,
                 annotations_path: Optional[Path] = None,
                 emg_event_label: Optional[str] = None,
                 manual_emg_times: Optional[Tuple[float, float]] = None,
                 ) -> IntegratedRecording:
    """Read session files from disk and integrate them."""
    engine = lossless = None
    emg = None
    store = None
    sources: Dict[str, str] = {}

    if engine_dir is not None:
        engine_dir = Path(engine_dir)
        engine = read_raw_txt(engine_dir / "raw.txt")
        sources["engine"] = str(engine_dir)
        ann_file = engine_dir / ANNOTATIONS_JSON
        if annotations_path is None and ann_file.exists():
            store = import_annotations(ann_file)
    if lossless_path is not None:
        lossless = read_raw_txt(lossless_path)
        sources["lossless"] = str(lossless_path)
    if annotations_path is not None:
        store = import_annotations(annotations_path)
        sources["annotations"] = str(annotations_path)
    if emg_path is not None:
        emg_path = Path(emg_path)
        if emg_path.suffix.lower() == ".csv":
            rate, emg = read_emg_csv(emg_path)
        else:
            if emg_rate_hz is None:
                raise LoadError(f"{emg_path}: bare-table EMG needs "
                                "a declared sample rate")
            rate, emg = read_emg_txt(emg_path, emg_rate_hz)
        emg_rate_hz = rate
        sources["emg"] = str(emg_path)

    rec = integrate(engine, lossless, store, emg, emg_rate_hz,
                    emg_event_label, manual_emg_times)
    rec.sources = sources
    return rec


# ---------------------------------------------------------------------------
# Navigation and analysis

def _epoch_obj(rec: IntegratedRecording, index: int,
               channels: Sequence[ChannelId] = (ChannelId.EEG_L,
                                                ChannelId.EEG_R)) -> Epoch:
    lo = index * EPOCH_SAMPLES
    return Epoch(index, {ChannelId(c): rec.channels[ChannelId(c).name][lo:lo + EPOCH_SAMPLES]
                         for c in channels if ChannelId(c).name in rec.channels})


def get_epoch(rec: IntegratedRecording, index: int) -> EpochView:
    """Slice every aligned channel to [index*7680, (index+1)*7680)."""
    if not 0 <= index < rec.n_epochs:
        raise RangeError(f"epoch {index} outside [0, {rec.n_epochs})")
    lo = index * EPOCH_SAMPLES
    hi = lo + EPOCH_SAMPLES
    view_channels = {name: arr[lo:hi] for name, arr in rec.channels.items()}
    tfr = analysis.tfr_epoch(_epoch_obj(rec, index))
    within = [a for a in rec.annotations if lo <= a.sample_index < hi]
    stage = None
    if rec.hypnogram is not None and index < len(rec.hypnogram.stages):
        stage = rec.hypnogram.stages[index]
    return EpochView(index, view_channels, tfr, within, stage)


def full_night_tfr(rec: IntegratedRecording,
                   channel: ChannelId = ChannelId.EEG_L) -> TFR:
    """Concatenated per-epoch TFRs over the whole recording."""
    if rec.n_epochs < 1:
        raise DataError("recording shorter than one epoch")
    parts = [analysis.tfr_epoch(_epoch_obj(rec, i, (channel,)), channel)
             for i in range(rec.n_epochs)]
    tfr = TFR(np.concatenate([p.times for p in parts]),
              parts[0].frequencies.copy(),
              np.vstack([p.power for p in parts]))
    rec.tfr = tfr
    return tfr


def score_offline(rec: IntegratedRecording, model: ScorerModel) -> Hypnogram:
    """Score every full epoch with the trained model; attaches the result."""
    if rec.n_epochs < 1:
        raise DataError("recording shorter than one epoch")
    epochs = [_epoch_obj(rec, i) for i in range(rec.n_epochs)]
    hyp = scoring.score_epochs(epochs, model)
    rec.hypnogram = hyp
    return hyp


# ---------------------------------------------------------------------------
# Export / import

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_channels_csv(rec: IntegratedRecording, path: Path) -> None:
    names = list(rec.channels)
    fmts = [_CSV_FMT.get(n, _CSV_DEFAULT_FMT) for n in names]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample_index," + ",".join(names) + "\n")
        cols = [rec.channels[n] for n in names]
        for i in range(rec.n_samples):
            row = ",".join(f % col[i] for f, col in zip(fmts, cols))
            fh.write(f"{i},{row}\n")


def _read_channels_csv(path: Path) -> Dict[str, np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if not header or header[0] != "sample_index":
                raise LoadError(f"{path}: expected 'sample_index,...' header")
            try:
                table = np.loadtxt(fh, delimiter=",", ndmin=2)
            except ValueError as exc:
                raise LoadError(f"{path}: malformed data row: {exc}") from exc
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if table.size == 0:
        return {name: np.empty(0) for name in header[1:]}
    if table.shape[1] != len(header):
        raise LoadError(f"{path}: rows have {table.shape[1]} fields, "
                        f"header names {len(header)}")
    out: Dict[str, np.ndarray] = {}
    for i, name in enumerate(header[1:]):
        col = table[:, i + 1]
        if name in ChannelId.__members__:
            # parsed text sits within half an LSB of the ADC grid; snap back
            # so imported values are bit-identical to the real-time path
            cid = ChannelId[name]
            col = dequantize_channel(quantize_channel(col, cid), cid)
        out[name] = col
    return out


def export(rec: IntegratedRecording, out_dir: Path,
           figures: bool = True) -> List[Path]:
    """Write aligned channels, hypnogram, annotations, TFR, and a manifest.

    Every data file re-loads through import_session; the manifest records
    byte sizes, checksums, and the SyncResults that built the integration.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    try:
        ch_path = out_dir / CHANNELS_CSV
        _write_channels_csv(rec, ch_path)
        written.append(ch_path)

        if rec.hypnogram is not None:
            hyp_path = out_dir / HYPNOGRAM_CSV
            write_hypnogram_csv(hyp_path, rec.hypnogram.epoch_indices,
                                rec.hypnogram.stages, rec.hypnogram.confidences)
            written.append(hyp_path)

        ann_path = out_dir / ANNOTATIONS_JSON
        rec.annotations.export_json(ann_path)
        written.append(ann_path)

        if rec.n_epochs >= 1:
            tfr = rec.tfr if rec.tfr is not None else full_night_tfr(rec)
            tfr_path = out_dir / TFR_BIN
            sidecar = write_tfr_bin(tfr_path, tfr.times, tfr.frequencies,
                                    tfr.power)
            written.extend([tfr_path, sidecar])

        if figures:
            from . import report
            written.extend(report.render_session_figures(rec, out_dir))

        manifest = {
            "created": datetime.now(timezone.utc).isoformat(),
            "decision_path": rec.decision_path,
            "rate_hz": rec.rate_hz,
            "n_samples": rec.n_samples,
            "n_epochs": rec.n_epochs,
            "channels": list(rec.channels),
            "sources": rec.sources,
            "sync": [sync.sync_result_to_dict(r) for r in rec.sync_results],
            "metadata": rec.metadata,
            "notes": {"AMBIENT_NOISE": "normalized 0..1, unitless"},
            "files": [{"name": p.name, "bytes": p.stat().st_size,
                       "sha256": _sha256(p)} for p in written],
        }
        man_path = out_dir / MANIFEST_NAME
        with open(man_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
        written.append(man_path)
    except OSError as exc:
        raise ExportError(f"export to {out_dir} failed: {exc}") from exc
    return written


def import_session(out_dir: Path) -> IntegratedRecording:
    """Re-load an exported session directory."""
    out_dir = Path(out_dir)
    man_path = out_dir / MANIFEST_NAME
    try:
        with open(man_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise LoadError(f"{man_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{man_path}: invalid JSON: {exc}") from exc

    channels = _read_channels_csv(out_dir / CHANNELS_CSV)
    store = import_annotations(out_dir / ANNOTATIONS_JSON)
    hypnogram = None
    hyp_path = out_dir / HYPNOGRAM_CSV
    if hyp_path.exists():
        epochs, stages, confs = read_hypnogram_csv(hyp_path)
        hypnogram = Hypnogram(epochs, list(stages), confs)
    tfr = None
    tfr_path = out_dir / TFR_BIN
    if tfr_path.exists():
        times, freqs, power = read_tfr_bin(tfr_path)
        tfr = TFR(times, freqs, power)

    results = [sync.sync_result_from_dict(d) for d in manifest.get("sync", [])]
    rec = IntegratedRecording(channels, float(manifest.get("rate_hz", SAMPLE_RATE_HZ)),
                              store, results,
                              manifest.get("decision_path", "imported"),
                              dict(manifest.get("sources", {})),
                              hypnogram, tfr,
                              dict(manifest.get("metadata", {})))
    return rec
