"""Wire codec: framing, CRC, quantization, and command payloads."""

import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnoloop.errors import FramingError, IntegrityError, RangeError, ValidationError
from somnoloop.protocol import (
    ACK_OK,
    CHANNEL_ORDER,
    CHANNEL_SCALE,
    FRAME_RECORD_SIZE,
    MAGIC,
    AuditoryParams,
    BlinkPattern,
    ChannelId,
    MessageKind,
    Modality,
    SampleFrame,
    SessionCtrl,
    StimulusSpec,
    TactileParams,
    VisualParams,
    adc_to_physical,
    crc16,
    decode_ack,
    decode_frame,
    decode_frames_bulk,
    decode_message,
    decode_session_ctrl,
    decode_stimulus,
    dequantize_channel,
    encode_ack,
    encode_end_of_stream,
    encode_frame,
    encode_frames_bulk,
    encode_hello,
    encode_message,
    encode_stimulus,
    message_to_bytes,
    physical_to_adc,
    quantize_channel,
    stimulus_from_dict,
    stimulus_to_dict,
    validate_stimulus,
)

# One frame frozen byte-for-byte in tests/fixtures/. Words picked per
# channel, physical values derived as word*scale, and the frame bytes
# computed with an independent bit-loop CRC outside this package.
FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN_WORDS = (1235, -875, 410, -205, 4096, 16384, 3685, 9830, 655, 29491)
GOLDEN_INDEX = 51200
GOLDEN_FRAME = (FIXTURES / "frame_51200.bin").read_bytes()


def crc16_reference(data: bytes) -> int:
    # CRC-16/XMODEM, bit by bit: poly 0x1021, init 0, no reflection.
    crc = 0
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
    return crc


def golden_values():
    return {ch: w * CHANNEL_SCALE[ch] for ch, w in zip(CHANNEL_ORDER, GOLDEN_WORDS)}


def test_crc16_known_check_value():
    # the published check value for CRC-16/XMODEM
    assert crc16(b"123456789") == 0x31C3


def test_crc16_matches_bitwise_reference():
    for blob in (b"", b"\x00", b"somnoloop", bytes(range(256))):
        assert crc16(blob) == crc16_reference(blob)


def test_frame_record_is_32_bytes():
    assert FRAME_RECORD_SIZE == 32
    data = encode_frame(SampleFrame(0, {}))
    assert len(data) == 32


def test_golden_frame_bytes():
    data = encode_frame(SampleFrame(GOLDEN_INDEX, golden_values()))
    assert data == GOLDEN_FRAME


def test_golden_frame_decodes():
    frame = decode_frame(GOLDEN_FRAME)
    assert frame.sample_index == GOLDEN_INDEX
    for ch, want in golden_values().items():
        assert frame.values[ch] == pytest.approx(want, abs=1e-12)


def test_header_layout():
    data = encode_frame(SampleFrame(7, {}))
    magic, kind, version, length = struct.unpack_from("<HBBH", data)
    assert magic == MAGIC == 0x5A4D
    assert kind == MessageKind.DATA_FRAME
    assert version == 1
    assert length == 24  # u32 index + ten int16 words


def test_corrupted_byte_raises_integrity_error():
    data = bytearray(encode_frame(SampleFrame(3, {})))
    data[10] ^= 0xFF
    with pytest.raises(IntegrityError):
        decode_frame(bytes(data))


def test_bad_magic_raises_framing_error():
    data = bytearray(encode_frame(SampleFrame(3, {})))
    data[0] ^= 0x01
    with pytest.raises(FramingError):
        decode_message(bytes(data))


def test_truncated_frame_raises():
    data = encode_frame(SampleFrame(3, {}))
    with pytest.raises(FramingError):
        decode_message(data[:20])


def test_sample_index_range():
    with pytest.raises(RangeError):
        encode_frame(SampleFrame(-1, {}))
    with pytest.raises(RangeError):
        encode_frame(SampleFrame(2 ** 32, {}))
    top = decode_frame(encode_frame(SampleFrame(2 ** 32 - 1, {})))
    assert top.sample_index == 2 ** 32 - 1


def test_eeg_out_of_codec_range_rejected():
    with pytest.raises(RangeError):
        encode_frame(SampleFrame(0, {ChannelId.EEG_L: 3280.0}))


def test_non_finite_value_rejected():
    with pytest.raises(RangeError):
        encode_frame(SampleFrame(0, {ChannelId.PPG: float("nan")}))


@pytest.mark.parametrize("channel,value,word", [
    (ChannelId.EEG_L, 12.34, 123),
    (ChannelId.EEG_L, -12.34, -123),
    (ChannelId.EEG_L, 0.05, 1),      # ties away from zero at half-LSB
    (ChannelId.TEMPERATURE, 36.85, 3685),
    (ChannelId.ACC_X, 1.0, 4096),
    (ChannelId.BATTERY, 1.0, 32767),
])
def test_quantization_examples(channel, value, word):
    assert physical_to_adc(value, channel) == word


def test_quantize_dequantize_arrays_match_scalar_path():
    rng = np.random.default_rng(5)
    values = rng.uniform(-300, 300, 64)
    words = quantize_channel(values, ChannelId.EEG_L)
    scalars = [physical_to_adc(v, ChannelId.EEG_L) for v in values]
    assert words.tolist() == scalars
    back = dequantize_channel(words, ChannelId.EEG_L)
    assert np.allclose(back, [adc_to_physical(w, ChannelId.EEG_L) for w in words])


@given(index=st.integers(min_value=0, max_value=2 ** 32 - 1),
       words=st.lists(st.integers(min_value=-32768, max_value=32767),
                      min_size=10, max_size=10))
@settings(max_examples=200, deadline=None)
def test_frame_roundtrip_any_words(index, words):
    # EEG saturates symmetrically: word -32768 is unreachable through encode
    words = [max(w, -32767) if ch in (ChannelId.EEG_L, ChannelId.EEG_R) else w
             for ch, w in zip(CHANNEL_ORDER, words)]
    values = {ch: w * CHANNEL_SCALE[ch] for ch, w in zip(CHANNEL_ORDER, words)}
    frame = decode_frame(encode_frame(SampleFrame(index, values)))
    assert frame.sample_index == index
    for ch, w in zip(CHANNEL_ORDER, words):
        assert physical_to_adc(frame.values[ch], ch) == w


@given(st.floats(min_value=-3276.7, max_value=3276.7,
                 allow_nan=False, allow_infinity=False))
@settings(max_examples=200, deadline=None)
def test_eeg_codec_error_bounded_by_half_lsb(value):
    word = physical_to_adc(value, ChannelId.EEG_L)
    assert abs(adc_to_physical(word, ChannelId.EEG_L) - value) <= 0.05 + 1e-12


def test_bulk_codec_matches_per_frame():
    rng = np.random.default_rng(9)
    raw = rng.integers(-2000, 2000, size=(64, 10), dtype=np.int16)
    blob = encode_frames_bulk(1000, raw)
    assert len(blob) == 64 * FRAME_RECORD_SIZE
    singles = b"".join(
        encode_frame(SampleFrame(1000 + i, {
            ch: adc_to_physical(int(w), ch)
            for ch, w in zip(CHANNEL_ORDER, row)}))
        for i, row in enumerate(raw))
    assert blob == singles
    indices, back = decode_frames_bulk(blob)
    assert indices.tolist() == list(range(1000, 1064))
    assert np.array_equal(back, raw)


def test_golden_ack_bytes():
    raw = (FIXTURES / "ack_424242.bin").read_bytes()
    assert message_to_bytes(encode_ack(424242)) == raw
    msg = decode_message(raw)
    assert msg.kind is MessageKind.ACK
    assert decode_ack(msg) == (ACK_OK, 424242)


def test_ack_roundtrip():
    msg = encode_ack(424242)
    status, index = decode_ack(msg)
    assert status == ACK_OK
    assert index == 424242
    raw = message_to_bytes(msg)
    again = decode_message(raw)
    assert again.kind is MessageKind.ACK


def test_session_ctrl_roundtrip():
    hello = decode_session_ctrl(encode_hello([ChannelId.EEG_L, ChannelId.EEG_R]))
    assert hello[0] is SessionCtrl.HELLO
    eos = decode_session_ctrl(encode_end_of_stream())
    assert eos[0] is SessionCtrl.END_OF_STREAM


def visual_spec():
    return StimulusSpec(Modality.VISUAL, VisualParams(
        rgb=(255, 0, 0), intensity=60, blink_count=3,
        pattern=BlinkPattern.SIMULTANEOUS, on_ms=200, off_ms=200))


def test_golden_stimulus_bytes():
    raw = (FIXTURES / "stim_visual_red.bin").read_bytes()
    assert message_to_bytes(encode_stimulus(visual_spec())) == raw
    assert decode_stimulus(decode_message(raw)) == visual_spec()


def test_stimulus_wire_roundtrip():
    spec = visual_spec()
    back = decode_stimulus(encode_stimulus(spec))
    assert back == spec


def test_stimulus_dict_roundtrip():
    spec = StimulusSpec(Modality.AUDITORY,
                        AuditoryParams(volume=40, cue_id=2, repetitions=5))
    assert stimulus_from_dict(stimulus_to_dict(spec)) == spec


def test_stimulus_validation_rejects_bad_fields():
    with pytest.raises(ValidationError):
        validate_stimulus(StimulusSpec(Modality.VISUAL, VisualParams(
            rgb=(300, 0, 0), intensity=60, blink_count=3,
            pattern=BlinkPattern.SIMULTANEOUS, on_ms=200, off_ms=200)))
    with pytest.raises(ValidationError):
        validate_stimulus(StimulusSpec(Modality.TACTILE, TactileParams(
            strength=150, pulse_count=2, on_ms=100, off_ms=100)))


def test_wrong_params_type_for_modality():
    with pytest.raises(ValidationError):
        validate_stimulus(StimulusSpec(
            Modality.VISUAL,
            AuditoryParams(volume=40, cue_id=1, repetitions=1)))
