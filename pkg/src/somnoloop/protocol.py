"""Open binary wire format for headband <-> engine traffic.

Message layout (little-endian), documented bit-exactly in docs/protocol.md:

    +-------+------+---------+-------------+------------------+-------+
    | magic | kind | version | payload_len |     payload      | crc16 |
    | 2B    | 1B   | 1B      | 2B          | payload_len B    | 2B    |
    +-------+------+---------+-------------+------------------+-------+

DATA_FRAME payload is a fixed 24 bytes (u32 sample_index + 10 x i16 channel
words), making every data frame exactly 32 bytes on the wire.  The CRC is
CRC-16/CCITT (XMODEM: poly 0x1021, init 0x0000) over magic..payload.

All functions here are pure; safe from any number of threads.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, Tuple, Union

import numpy as np

from .errors import FramingError, IntegrityError, RangeError, ValidationError, VersionError

MAGIC = 0x5A4D
PROTOCOL_VERSION = 1

_HEADER = struct.Struct("<HBBH")          # magic, kind, version, payload_len
_CRC = struct.Struct("<H")
_FRAME_PAYLOAD = struct.Struct("<I10h")   # sample_index + ten channel words
_ACK_PAYLOAD = struct.Struct("<BI")       # status + sample_index

HEADER_SIZE = _HEADER.size                # 6
FRAME_RECORD_SIZE = HEADER_SIZE + _FRAME_PAYLOAD.size + _CRC.size  # 32


class MessageKind(IntEnum):
    DATA_FRAME = 1
    STIM_COMMAND = 2
    SESSION_CTRL = 3
    ACK = 4


class ChannelId(IntEnum):
    """Stable integer tags for every signal the headband can deliver."""

    EEG_L = 0
    EEG_R = 1
    ACC_X = 2
    ACC_Y = 3
    ACC_Z = 4
    PPG = 5
    TEMPERATURE = 6
    AMBIENT_LIGHT = 7
    AMBIENT_NOISE = 8
    BATTERY = 9


CHANNEL_ORDER: Tuple[ChannelId, ...] = tuple(ChannelId)
EEG_CHANNELS = (ChannelId.EEG_L, ChannelId.EEG_R)

# Physical units per least-significant bit.  EEG in microvolts, acceleration
# in g, temperature in degrees C, the rest normalized to [0, 1].
CHANNEL_SCALE: Dict[ChannelId, float] = {
    ChannelId.EEG_L: 0.1,
    ChannelId.EEG_R: 0.1,
    ChannelId.ACC_X: 1.0 / 4096.0,
    ChannelId.ACC_Y: 1.0 / 4096.0,
    ChannelId.ACC_Z: 1.0 / 4096.0,
    ChannelId.PPG: 1.0 / 32767.0,
    ChannelId.TEMPERATURE: 0.01,
    ChannelId.AMBIENT_LIGHT: 1.0 / 32767.0,
    ChannelId.AMBIENT_NOISE: 1.0 / 32767.0,
    ChannelId.BATTERY: 1.0 / 32767.0,
}

EEG_MAX_UV = 3276.7  # int16 codec range at 0.1 uV/LSB


# ---------------------------------------------------------------------------
# CRC-16/CCITT (XMODEM)

def _build_crc_table():
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
        table.append(crc)
    return tuple(table)


_CRC_TABLE = _build_crc_table()


def crc16(data: bytes) -> int:
    crc = 0
    for b in data:
        crc = ((crc << 8) & 0xFF00) ^ _CRC_TABLE[(crc >> 8) ^ b]
    return crc


# ---------------------------------------------------------------------------
# Value types

@dataclass(frozen=True)
class SampleFrame:
    """One 1/256-s tick of decoded sensor values keyed by ChannelId.

    Channels absent from ``values`` encode as raw 0; decoding always yields
    all ten channels.
    """

    sample_index: int
    values: Dict[ChannelId, float]


@dataclass(frozen=True)
class WireMessage:
    kind: MessageKind
    payload: bytes


class Modality(IntEnum):
    VISUAL = 1
    AUDITORY = 2
    TACTILE = 3
    AUDIO_CUE = 4


class BlinkPattern(IntEnum):
    SIMULTANEOUS = 0
    ALTERNATING = 1


@dataclass(frozen=True)
class VisualParams:
    rgb: Tuple[int, int, int]
    intensity: int          # percent, 0..100
    blink_count: int        # 1..100
    pattern: BlinkPattern
    on_ms: int              # 10..10000
    off_ms: int


@dataclass(frozen=True)
class AuditoryParams:
    volume: int             # percent, 0..100
    cue_id: int             # 0..65535
    repetitions: int        # 1..100


@dataclass(frozen=True)
class TactileParams:
    strength: int           # percent, 0..100
    pulse_count: int        # 1..100
    on_ms: int
    off_ms: int


@dataclass(frozen=True)
class AudioCueParams:
    """Text label resolved to a pre-rendered audio asset by the engine."""

    label: str


StimulusParams = Union[VisualParams, AuditoryParams, TactileParams, AudioCueParams]

_PARAMS_BY_MODALITY = {
    Modality.VISUAL: VisualParams,
    Modality.AUDITORY: AuditoryParams,
    Modality.TACTILE: TactileParams,
    Modality.AUDIO_CUE: AudioCueParams,
}


@dataclass(frozen=True)
class StimulusSpec:
    """Parameterized sensory stimulus command; round-trippable over the wire."""

    modality: Modality
    params: StimulusParams

    @classmethod
    def visual(cls, rgb=(255, 0, 0), intensity=100, blink_count=1,
               pattern=BlinkPattern.SIMULTANEOUS, on_ms=500, off_ms=500):
        return cls(Modality.VISUAL,
                   VisualParams(tuple(rgb), intensity, blink_count, BlinkPattern(pattern), on_ms, off_ms))

    @classmethod
    def auditory(cls, volume=50, cue_id=0, repetitions=1):
        return cls(Modality.AUDITORY, AuditoryParams(volume, cue_id, repetitions))

    @classmethod
    def tactile(cls, strength=50, pulse_count=1, on_ms=200, off_ms=200):
        return cls(Modality.TACTILE, TactileParams(strength, pulse_count, on_ms, off_ms))

    @classmethod
    def audio_cue(cls, label: str):
        return cls(Modality.AUDIO_CUE, AudioCueParams(label))


def _check(cond: bool, field: str, bad):
    if not cond:
        bad.append(field)


def validate_stimulus(spec: StimulusSpec) -> None:
    """Raise ValidationError naming every field out of range."""
    bad = []
    p = spec.params
    if not isinstance(p, _PARAMS_BY_MODALITY.get(spec.modality, ())):
        raise ValidationError("modality")
    if isinstance(p, VisualParams):
        _check(len(p.rgb) == 3 and all(0 <= c <= 255 for c in p.rgb), "rgb", bad)
        _check(0 <= p.intensity <= 100, "intensity", bad)
        _check(1 <= p.blink_count <= 100, "blink_count", bad)
        _check(p.pattern in (BlinkPattern.SIMULTANEOUS, BlinkPattern.ALTERNATING), "pattern", bad)
        _check(10 <= p.on_ms <= 10000, "on_ms", bad)
        _check(10 <= p.off_ms <= 10000, "off_ms", bad)
    elif isinstance(p, AuditoryParams):
        _check(0 <= p.volume <= 100, "volume", bad)
        _check(0 <= p.cue_id <= 0xFFFF, "cue_id", bad)
        _check(1 <= p.repetitions <= 100, "repetitions", bad)
    elif isinstance(p, TactileParams):
        _check(0 <= p.strength <= 100, "strength", bad)
        _check(1 <= p.pulse_count <= 100, "pulse_count", bad)
        _check(10 <= p.on_ms <= 10000, "on_ms", bad)
        _check(10 <= p.off_ms <= 10000, "off_ms", bad)
    elif isinstance(p, AudioCueParams):
        _check(isinstance(p.label, str) and 1 <= len(p.label.encode("utf-8")) <= 255, "label", bad)
    if bad:
        raise ValidationError(*bad)


# ---------------------------------------------------------------------------
# ADC scaling

def adc_to_physical(raw: int, channel: ChannelId) -> float:
    """Affine map from a signed 16-bit word to physical units.

    Total on the int16 domain; never raises for in-range raw words.
    """
    return raw * CHANNEL_SCALE[ChannelId(channel)]


def physical_to_adc(value: float, channel: ChannelId) -> int:
    """Quantize a physical value to the codec grid: floor(v/scale + 0.5).

    Raises RangeError naming the channel if the result leaves int16.
    """
    channel = ChannelId(channel)
    raw = math.floor(value / CHANNEL_SCALE[channel] + 0.5)
    if not -32768 <= raw <= 32767:
        raise RangeError(f"{channel.name}: value {value!r} outside codec range")
    return raw


# ---------------------------------------------------------------------------
# Message-level framing

def encode_message(kind: MessageKind, payload: bytes) -> bytes:
    head = _HEADER.pack(MAGIC, int(kind), PROTOCOL_VERSION, len(payload))
    body = head + payload
    return body + _CRC.pack(crc16(body))


def decode_message(data: bytes) -> WireMessage:
    """Decode one complete message; typed errors, never silent truncation."""
    if len(data) < HEADER_SIZE + _CRC.size:
        raise FramingError(f"truncated message: {len(data)} bytes")
    magic, kind, version, payload_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FramingError(f"bad magic 0x{magic:04X}")
    if version != PROTOCOL_VERSION:
        raise VersionError(f"unknown protocol version {version}")
    expected = HEADER_SIZE + payload_len + _CRC.size
    if len(data) != expected:
        raise FramingError(f"length mismatch: got {len(data)}, header says {expected}")
    (crc,) = _CRC.unpack_from(data, expected - _CRC.size)
    if crc != crc16(data[: expected - _CRC.size]):
        raise IntegrityError("CRC mismatch")
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise FramingError(f"unknown message kind {kind}") from None
    return WireMessage(kind, bytes(data[HEADER_SIZE: expected - _CRC.size]))


# ---------------------------------------------------------------------------
# DATA_FRAME codec

def encode_frame(frame: SampleFrame) -> bytes:
    """Encode one sample frame to its fixed 32-byte wire record."""
    if frame.sample_index < 0 or frame.sample_index > 0xFFFFFFFF:
        raise RangeError(f"sample_index {frame.sample_index} outside u32")
    words = []
    for ch in CHANNEL_ORDER:
        value = frame.values.get(ch, 0.0)
        if not math.isfinite(value):
            raise RangeError(f"{ch.name}: non-finite value")
        if ch in EEG_CHANNELS and abs(value) > EEG_MAX_UV + 1e-9:
            raise RangeError(f"{ch.name}: EEG value {value!r} outside +/-{EEG_MAX_UV} uV")
        words.append(physical_to_adc(value, ch))
    payload = _FRAME_PAYLOAD.pack(frame.sample_index, *words)
    return encode_message(MessageKind.DATA_FRAME, payload)


def decode_frame(data: bytes) -> SampleFrame:
    """Inverse of encode_frame up to codec quantization."""
    msg = decode_message(data)
    if msg.kind is not MessageKind.DATA_FRAME:
        raise FramingError(f"expected DATA_FRAME, got {msg.kind.name}")
    return decode_frame_payload(msg.payload)


def decode_frame_payload(payload: bytes) -> SampleFrame:
    if len(payload) != _FRAME_PAYLOAD.size:
        raise FramingError(f"data frame payload must be {_FRAME_PAYLOAD.size} bytes")
    fields = _FRAME_PAYLOAD.unpack(payload)
    sample_index, words = fields[0], fields[1:]
    values = {ch: adc_to_physical(w, ch) for ch, w in zip(CHANNEL_ORDER, words)}
    return SampleFrame(sample_index, values)


# ---------------------------------------------------------------------------
# STIM_COMMAND codec

def encode_stimulus(spec: StimulusSpec) -> WireMessage:
    validate_stimulus(spec)
    p = spec.params
    if isinstance(p, VisualParams):
        body = struct.pack("<3BBBBHH", *p.rgb, p.intensity, p.blink_count,
                           int(p.pattern), p.on_ms, p.off_ms)
    elif isinstance(p, AuditoryParams):
        body = struct.pack("<BHB", p.volume, p.cue_id, p.repetitions)
    elif isinstance(p, TactileParams):
        body = struct.pack("<BBHH", p.strength, p.pulse_count, p.on_ms, p.off_ms)
    else:
        raw = p.label.encode("utf-8")
        body = struct.pack("<B", len(raw)) + raw
    return WireMessage(MessageKind.STIM_COMMAND, bytes([int(spec.modality)]) + body)


def decode_stimulus(msg: WireMessage) -> StimulusSpec:
    if msg.kind is not MessageKind.STIM_COMMAND:
        raise FramingError(f"expected STIM_COMMAND, got {msg.kind.name}")
    if not msg.payload:
        raise FramingError("empty stimulus payload")
    try:
        modality = Modality(msg.payload[0])
    except ValueError:
        raise ValidationError("modality") from None
    body = msg.payload[1:]
    try:
        if modality is Modality.VISUAL:
            r, g, b, intensity, blinks, pattern, on_ms, off_ms = struct.unpack("<3BBBBHH", body)
            spec = StimulusSpec(modality, VisualParams((r, g, b), intensity, blinks,
                                                       BlinkPattern(pattern), on_ms, off_ms))
        elif modality is Modality.AUDITORY:
            volume, cue_id, reps = struct.unpack("<BHB", body)
            spec = StimulusSpec(modality, AuditoryParams(volume, cue_id, reps))
        elif modality is Modality.TACTILE:
            strength, pulses, on_ms, off_ms = struct.unpack("<BBHH", body)
            spec = StimulusSpec(modality, TactileParams(strength, pulses, on_ms, off_ms))
        else:
            (n,) = struct.unpack_from("<B", body)
            if len(body) != 1 + n:
                raise FramingError("audio cue label length mismatch")
            spec = StimulusSpec(modality, AudioCueParams(body[1:].decode("utf-8")))
    except struct.error:
        raise FramingError("stimulus payload does not match its modality layout") from None
    validate_stimulus(spec)
    return spec


# ---------------------------------------------------------------------------
# Bulk DATA_FRAME codec (hot path: whole blocks of consecutive frames)

_CRC_TABLE_NP = np.asarray(_CRC_TABLE, dtype=np.uint16)


def quantize_channel(values: np.ndarray, channel: ChannelId) -> np.ndarray:
    """Vectorized physical_to_adc; same floor(v/scale + 0.5) grid."""
    raw = np.floor(np.asarray(values, dtype=np.float64) / CHANNEL_SCALE[ChannelId(channel)] + 0.5)
    if raw.min() < -32768 or raw.max() > 32767:
        raise RangeError(f"{ChannelId(channel).name}: block contains values outside codec range")
    return raw.astype(np.int16)


def dequantize_channel(raw: np.ndarray, channel: ChannelId) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) * CHANNEL_SCALE[ChannelId(channel)]


def _crc16_rows(rows: np.ndarray) -> np.ndarray:
    """CRC-16/CCITT of each row of a uint8 matrix, vectorized across rows."""
    crc = np.zeros(rows.shape[0], dtype=np.uint16)
    for col in range(rows.shape[1]):
        crc = ((crc << 8) & 0xFF00) ^ _CRC_TABLE_NP[(crc >> 8) ^ rows[:, col]]
    return crc


def encode_frames_bulk(first_index: int, raw: np.ndarray) -> bytes:
    """Encode consecutive DATA_FRAMEs from an (n, 10) int16 matrix.

    Bit-identical to calling encode_frame per row; one allocation for the
    whole block.
    """
    raw = np.ascontiguousarray(raw, dtype=np.int16)
    n = raw.shape[0]
    if raw.ndim != 2 or raw.shape[1] != len(CHANNEL_ORDER):
        raise RangeError(f"raw block must be (n, {len(CHANNEL_ORDER)}) int16")
    out = np.empty((n, FRAME_RECORD_SIZE), dtype=np.uint8)
    head = _HEADER.pack(MAGIC, int(MessageKind.DATA_FRAME), PROTOCOL_VERSION, _FRAME_PAYLOAD.size)
    out[:, :HEADER_SIZE] = np.frombuffer(head, dtype=np.uint8)
    idx = (first_index + np.arange(n, dtype=np.uint64)).astype("<u4")
    out[:, HEADER_SIZE:HEADER_SIZE + 4] = idx.view(np.uint8).reshape(n, 4)
    out[:, HEADER_SIZE + 4:HEADER_SIZE + 24] = raw.astype("<i2").view(np.uint8).reshape(n, 20)
    crc = _crc16_rows(out[:, :HEADER_SIZE + 24]).astype("<u2")
    out[:, HEADER_SIZE + 24:] = crc.view(np.uint8).reshape(n, 2)
    return out.tobytes()


def decode_frames_bulk(data: bytes):
    """Decode a block of back-to-back DATA_FRAME records.

    Returns (sample_indices u32 array, raw (n, 10) int16 matrix).  The same
    typed errors as decode_frame apply to the block as a whole.
    """
    if len(data) % FRAME_RECORD_SIZE:
        raise FramingError(f"block length {len(data)} not a multiple of {FRAME_RECORD_SIZE}")
    rows = np.frombuffer(data, dtype=np.uint8).reshape(-1, FRAME_RECORD_SIZE)
    head = rows[:, :HEADER_SIZE]
    expected = np.frombuffer(
        _HEADER.pack(MAGIC, int(MessageKind.DATA_FRAME), PROTOCOL_VERSION, _FRAME_PAYLOAD.size),
        dtype=np.uint8)
    if not np.array_equal(head[:, [0, 1, 2, 4, 5]],
                          np.broadcast_to(expected[[0, 1, 2, 4, 5]], (rows.shape[0], 5))):
        raise FramingError("bad magic/kind/length in frame block")
    if not np.all(head[:, 3] == expected[3]):
        raise VersionError("unknown protocol version in frame block")
    crc_stored = rows[:, HEADER_SIZE + 24:].copy().view("<u2").ravel()
    crc_actual = _crc16_rows(rows[:, :HEADER_SIZE + 24])
    if not np.array_equal(crc_stored, crc_actual):
        raise IntegrityError("CRC mismatch in frame block")
    idx = rows[:, HEADER_SIZE:HEADER_SIZE + 4].copy().view("<u4").ravel()
    raw = rows[:, HEADER_SIZE + 4:HEADER_SIZE + 24].copy().view("<i2").reshape(-1, 10)
    return idx, raw


# ---------------------------------------------------------------------------
# ACK / SESSION_CTRL codecs

ACK_OK = 0


def encode_ack(sample_index: int, status: int = ACK_OK) -> WireMessage:
    return WireMessage(MessageKind.ACK, _ACK_PAYLOAD.pack(status, sample_index))


def decode_ack(msg: WireMessage) -> Tuple[int, int]:
    """Return (status, sample_index); status != 0 means NACK."""
    if msg.kind is not MessageKind.ACK:
        raise FramingError(f"expected ACK, got {msg.kind.name}")
    try:
        status, sample_index = _ACK_PAYLOAD.unpack(msg.payload)
    except struct.error:
        raise FramingError("bad ACK payload") from None
    return status, sample_index


class SessionCtrl(IntEnum):
    HELLO = 1
    END_OF_STREAM = 2


def encode_hello(channels) -> WireMessage:
    mask = 0
    for ch in channels:
        mask |= 1 << int(ChannelId(ch))
    return WireMessage(MessageKind.SESSION_CTRL, struct.pack("<BH", SessionCtrl.HELLO, mask))


def encode_end_of_stream() -> WireMessage:
    return WireMessage(MessageKind.SESSION_CTRL, struct.pack("<B", SessionCtrl.END_OF_STREAM))


def decode_session_ctrl(msg: WireMessage):
    """Return (SessionCtrl, set of ChannelId or None)."""
    if msg.kind is not MessageKind.SESSION_CTRL:
        raise FramingError(f"expected SESSION_CTRL, got {msg.kind.name}")
    if not msg.payload:
        raise FramingError("empty session control payload")
    try:
        op = SessionCtrl(msg.payload[0])
    except ValueError:
        raise FramingError(f"unknown session control op {msg.payload[0]}") from None
    if op is SessionCtrl.HELLO:
        (mask,) = struct.unpack_from("<H", msg.payload, 1)
        channels = {ch for ch in CHANNEL_ORDER if mask & (1 << int(ch))}
        return op, channels
    return op, None


def message_to_bytes(msg: WireMessage) -> bytes:
    return encode_message(msg.kind, msg.payload)


# ---------------------------------------------------------------------------
# JSON plumbing for specs (command log, annotation file, HTTP API)

def stimulus_to_dict(spec: StimulusSpec) -> dict:
    p = spec.params
    d = {"modality": spec.modality.name.lower()}
    if isinstance(p, VisualParams):
        d.update(rgb=list(p.rgb), intensity=p.intensity, blink_count=p.blink_count,
                 pattern=p.pattern.name.lower(), on_ms=p.on_ms, off_ms=p.off_ms)
    elif isinstance(p, AuditoryParams):
        d.update(volume=p.volume, cue_id=p.cue_id, repetitions=p.repetitions)
    elif isinstance(p, TactileParams):
        d.update(strength=p.strength, pulse_count=p.pulse_count, on_ms=p.on_ms, off_ms=p.off_ms)
    else:
        d.update(label=p.label)
    return d


def stimulus_from_dict(d: dict) -> StimulusSpec:
    try:
        modality = Modality[str(d["modality"]).upper()]
    except (KeyError, TypeError):
        raise ValidationError("modality") from None
    try:
        if modality is Modality.VISUAL:
            spec = StimulusSpec(modality, VisualParams(
                tuple(int(c) for c in d["rgb"]), int(d["intensity"]), int(d["blink_count"]),
                BlinkPattern[str(d["pattern"]).upper()], int(d["on_ms"]), int(d["off_ms"])))
        elif modality is Modality.AUDITORY:
            spec = StimulusSpec(modality, AuditoryParams(
                int(d["volume"]), int(d.get("cue_id", 0)), int(d["repetitions"])))
        elif modality is Modality.TACTILE:
            spec = StimulusSpec(modality, TactileParams(
                int(d["strength"]), int(d["pulse_count"]), int(d["on_ms"]), int(d["off_ms"])))
        else:
            spec = StimulusSpec(modality, AudioCueParams(str(d["label"])))
    except KeyError as exc:
        raise ValidationError(str(exc.args[0])) from None
    except (TypeError, ValueError):
        raise ValidationError("params") from None
    validate_stimulus(spec)
    return spec
