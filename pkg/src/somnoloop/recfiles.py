"""Readers and writers for the on-disk recording formats.

All formats are plain text or documented binary so recordings stay
inspectable without special tooling:

* raw recording: commented header, then one CSV line per sample
* real-time scoring: exactly one ``epoch_index,stage,confidence`` line per epoch
* per-second sample log: ``second,delivered,stored`` CSV
* hypnogram: CSV with per-stage confidences
* time-frequency matrix: row-major float32 blob + JSON sidecar
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, IO, List, Optional, Sequence, Tuple

import numpy as np

from .core import SAMPLE_RATE_HZ, SleepStage
from .errors import ExportError, LoadError
from .protocol import CHANNEL_ORDER, ChannelId, dequantize_channel, quantize_channel

RAW_MAGIC_LINE = "# somnoloop raw recording v1"

# Print precision per channel, chosen so parsing the text back and
# re-quantizing recovers the exact ADC code (formats are strictly finer
# than half an LSB).
_FMT = {
    ChannelId.EEG_L: "%.1f",
    ChannelId.EEG_R: "%.1f",
    ChannelId.ACC_X: "%.6f",
    ChannelId.ACC_Y: "%.6f",
    ChannelId.ACC_Z: "%.6f",
    ChannelId.PPG: "%.6f",
    ChannelId.TEMPERATURE: "%.2f",
    ChannelId.AMBIENT_LIGHT: "%.6f",
    ChannelId.AMBIENT_NOISE: "%.6f",
    ChannelId.BATTERY: "%.6f",
}


# ---------------------------------------------------------------------------
# Raw recording (.txt)

class RawTextWriter:
    """Streaming writer for the raw recording format."""

    def __init__(self, path: Path, channels: Sequence[ChannelId] = CHANNEL_ORDER):
        self.path = Path(path)
        self.channels = [ChannelId(c) for c in channels]
        self.n_rows = 0
        self._fh: Optional[IO[str]] = open(self.path, "w", encoding="utf-8")
        self._row_fmt = "%d," + ",".join(_FMT[c] for c in self.channels) + "\n"
        self._fh.write(RAW_MAGIC_LINE + "\n")
        self._fh.write("# channel order: " + ",".join(c.name for c in self.channels) + "\n")
        self._fh.write(f"# sample rate: {SAMPLE_RATE_HZ}\n")

    def write_block(self, first_index: int, raw: np.ndarray) -> None:
        """Append a contiguous run of quantized samples."""
        self.write_rows(np.arange(first_index, first_index + len(raw)), raw)

    def write_rows(self, indices: np.ndarray, raw: np.ndarray) -> None:
        """Append quantized samples; ``raw`` is (n, 10) int16 in wire channel
        order, ``indices`` the sample index of each row (gaps allowed)."""
        if self._fh is None:
            raise ExportError("writer already closed")
        phys = np.column_stack([dequantize_channel(raw[:, int(c)], c) for c in self.channels])
        fmt = self._row_fmt
        out = []
        for idx, row in zip(indices, phys):
            out.append(fmt % (idx, *row))
        self._fh.write("".join(out))
        self.n_rows += len(phys)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "RawTextWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class RawRecording:
    """A parsed raw recording, canonicalized to the ADC grid.

    Parsed floats are snapped back to their int16 codes, so values obtained
    offline are bit-identical to what the real-time path computed from the
    wire frames.
    """

    sample_indices: np.ndarray            # (n,) int64
    raw: np.ndarray                       # (n, len(channels)) int16
    channels: List[ChannelId]

    @property
    def n_samples(self) -> int:
        return len(self.sample_indices)

    @property
    def duration_s(self) -> float:
        return self.n_samples / SAMPLE_RATE_HZ

    def channel_physical(self, channel: ChannelId) -> np.ndarray:
        channel = ChannelId(channel)
        if channel not in self.channels:
            raise LoadError(f"channel {channel.name} not present in recording")
        col = self.channels.index(channel)
        return dequantize_channel(self.raw[:, col], channel)

    def to_raw_matrix(self) -> np.ndarray:
        """Full (n, 10) int16 matrix in wire order; absent channels are zero."""
        full = np.zeros((self.n_samples, len(CHANNEL_ORDER)), dtype=np.int16)
        for col, ch in enumerate(self.channels):
            full[:, int(ch)] = self.raw[:, col]
        return full


def read_raw_txt(path: Path) -> RawRecording:
    path = Path(path)
    channels: Optional[List[ChannelId]] = None
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != RAW_MAGIC_LINE:
            raise LoadError(f"{path}: not a raw recording (bad first line)")
        data_start = fh.tell()
        while True:
            data_start = fh.tell()
            line = fh.readline()
            if not line.startswith("#"):
                break
            if line.startswith("# channel order:"):
                names = line.split(":", 1)[1].strip()
                try:
                    channels = [ChannelId[n.strip()] for n in names.split(",")]
                except KeyError as exc:
                    raise LoadError(f"{path}: unknown channel {exc}") from exc
        if channels is None:
            raise LoadError(f"{path}: missing '# channel order:' header")
        fh.seek(data_start)
        try:
            table = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise LoadError(f"{path}: malformed data row: {exc}") from exc
    if table.size == 0:
        return RawRecording(np.zeros(0, dtype=np.int64),
                            np.zeros((0, len(channels)), dtype=np.int16), channels)
    if table.shape[1] != 1 + len(channels):
        raise LoadError(f"{path}: rows have {table.shape[1]} fields, "
                        f"expected {1 + len(channels)}")
    indices = table[:, 0].astype(np.int64)
    raw = np.empty((len(table), len(channels)), dtype=np.int16)
    for col, ch in enumerate(channels):
        raw[:, col] = quantize_channel(table[:, 1 + col], ch)
    return RawRecording(indices, raw, channels)


# ---------------------------------------------------------------------------
# Real-time scoring (.txt)

def write_scoring_txt(path: Path,
                      rows: Sequence[Tuple[int, SleepStage, float]]) -> None:
    """Exactly one line per epoch, no header: ``epoch_index,stage,confidence``."""
    with open(path, "w", encoding="utf-8") as fh:
        for epoch_index, stage, confidence in rows:
            fh.write(f"{epoch_index},{SleepStage(stage).name},{confidence:.4f}\n")


def read_scoring_txt(path: Path) -> List[Tuple[int, SleepStage, float]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                idx, stage, conf = line.split(",")
                rows.append((int(idx), SleepStage[stage], float(conf)))
            except (ValueError, KeyError) as exc:
                raise LoadError(f"{path}:{lineno}: bad scoring line") from exc
    return rows


# ---------------------------------------------------------------------------
# Per-second sample log (.csv)

SAMPLE_LOG_HEADER = "second,delivered,stored"


def write_sample_log(path: Path, rows: Sequence[Tuple[int, int, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SAMPLE_LOG_HEADER + "\n")
        for second, delivered, stored in rows:
            fh.write(f"{second},{delivered},{stored}\n")


def read_sample_log(path: Path) -> List[Tuple[int, int, int]]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != SAMPLE_LOG_HEADER:
            raise LoadError(f"{path}: bad sample log header")
        rows = []
        for line in fh:
            if line.strip():
                s, d, k = line.strip().split(",")
                rows.append((int(s), int(d), int(k)))
    return rows


# ---------------------------------------------------------------------------
# Hypnogram (.csv)

HYPNOGRAM_HEADER = ("epoch_index,stage_code,stage_name,"
                    "conf_W,conf_N1,conf_N2,conf_N3,conf_REM")


def write_hypnogram_csv(path: Path, epochs: Sequence[int], stages: Sequence[SleepStage],
                        confidences: np.ndarray) -> None:
    """``confidences`` is (n_epochs, 5) in stage-code order."""
    confidences = np.asarray(confidences, dtype=float)
    if confidences.shape != (len(epochs), len(SleepStage)):
        raise ExportError(f"confidence matrix shape {confidences.shape} does not "
                          f"match {len(epochs)} epochs")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(HYPNOGRAM_HEADER + "\n")
        for i, (idx, stage) in enumerate(zip(epochs, stages)):
            stage = SleepStage(stage)
            confs = ",".join("%.6f" % c for c in confidences[i])
            fh.write(f"{idx},{int(stage)},{stage.name},{confs}\n")


def read_hypnogram_csv(path: Path) -> Tuple[np.ndarray, List[SleepStage], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != HYPNOGRAM_HEADER:
            raise LoadError(f"{path}: bad hypnogram header")
        epochs, stages, confs = [], [], []
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 8:
                raise LoadError(f"{path}:{lineno}: expected 8 fields")
            epochs.append(int(parts[0]))
            code = int(parts[1])
            stage = SleepStage(code)
            if stage.name != parts[2]:
                raise LoadError(f"{path}:{lineno}: stage code {code} does not "
                                f"match name {parts[2]!r}")
            stages.append(stage)
            confs.append([float(p) for p in parts[3:]])
    return (np.array(epochs, dtype=np.int64), stages,
            np.array(confs, dtype=float).reshape(len(epochs), len(SleepStage)))


# ---------------------------------------------------------------------------
# Time-frequency matrix (float32 blob + JSON sidecar)

def write_tfr_bin(path: Path, times: np.ndarray, frequencies: np.ndarray,
                  power: np.ndarray, units: str = "uV^2/Hz") -> Path:
    """Row-major float32 matrix (time x frequency) with a JSON header file."""
    path = Path(path)
    power = np.asarray(power, dtype=np.float32)
    if power.shape != (len(times), len(frequencies)):
        raise ExportError(f"TFR matrix shape {power.shape} does not match "
                          f"{len(times)} times x {len(frequencies)} frequencies")
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(power).tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = {
        "dtype": "float32",
        "order": "row-major",
        "shape": [int(power.shape[0]), int(power.shape[1])],
        "axis0": "time_s",
        "axis1": "frequency_hz",
        "times_s": [float(t) for t in times],
        "frequencies_hz": [float(f) for f in frequencies],
        "units": units,
    }
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    return sidecar


def read_tfr_bin(path: Path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (times, frequencies, power) from the blob + sidecar pair."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise LoadError(f"{sidecar}: TFR sidecar missing")
    with open(sidecar, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    shape = tuple(meta["shape"])
    power = np.frombuffer(open(path, "rb").read(), dtype=np.float32)
    if power.size != shape[0] * shape[1]:
        raise LoadError(f"{path}: payload holds {power.size} floats, "
                        f"header says {shape[0]}x{shape[1]}")
    return (np.array(meta["times_s"], dtype=float),
            np.array(meta["frequencies_hz"], dtype=float),
            power.reshape(shape).astype(np.float64))


# ---------------------------------------------------------------------------
# External EMG input

def read_emg_csv(path: Path) -> Tuple[float, Dict[str, np.ndarray]]:
    """Parse ``time_s,ch1,ch2,...`` CSV; returns (sample_rate_hz, channels).

    The rate is inferred from the median time step.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        names = [n.strip() for n in header.split(",")]
        if not names or names[0] != "time_s" or len(names) < 2:
            raise LoadError(f"{path}: expected header 'time_s,ch1,...'")
        try:
            table = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise LoadError(f"{path}: malformed data row: {exc}") from exc
    if len(table) < 2:
        raise LoadError(f"{path}: need at least 2 samples to infer the rate")
    if table.shape[1] != len(names):
        raise LoadError(f"{path}: rows have {table.shape[1]} fields, "
                        f"header names {len(names)}")
    steps = np.diff(table[:, 0])
    if np.any(steps <= 0):
        raise LoadError(f"{path}: time column must be strictly increasing")
    rate = 1.0 / float(np.median(steps))
    return rate, {name: table[:, i] for i, name in enumerate(names) if i > 0}


def read_emg_txt(path: Path, rate_hz: float) -> Tuple[float, Dict[str, np.ndarray]]:
    """Parse a bare sample table (one column per channel) at a declared rate."""
    path = Path(path)
    if rate_hz <= 0:
        raise LoadError(f"{path}: declared rate must be positive")
    try:
        table = np.loadtxt(path, comments="#", delimiter=None, ndmin=2)
    except ValueError:
        try:
            table = np.loadtxt(path, comments="#", delimiter=",", ndmin=2)
        except ValueError as exc:
            raise LoadError(f"{path}: malformed data row: {exc}") from exc
    if table.size == 0:
        raise LoadError(f"{path}: no samples")
    return float(rate_hz), {f"ch{i + 1}": table[:, i]
                            for i in range(table.shape[1])}
