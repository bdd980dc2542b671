import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest

from helpers import random_message
from olts import wire

GOLDEN = Path(__file__).resolve().parent.parent / "fixtures" / "golden_frames.json"


def hex_to_f64(items):
    return np.frombuffer(bytes.fromhex("".join(items)), dtype="<f8").copy()


def build_from_fixture(entry):
    t = entry["type"]
    if t == "Hello":
        return wire.Hello(entry["client_id"], entry["sim_id"],
                          hex_to_f64(entry["params_hex"]), tuple(entry["field_shape"]))
    if t == "Timestep":
        return wire.Timestep(entry["sim_id"], entry["t_index"], hex_to_f64(entry["values_hex"]))
    if t == "Bye":
        return wire.Bye(entry["sim_id"], entry["last_t"])
    if t == "Heartbeat":
        return wire.Heartbeat(entry["sender_id"], entry["wallclock_ms"])
    if t == "ParamRequest":
        return wire.ParamRequest(entry["count"])
    if t == "ParamAssign":
        return wire.ParamAssign(entry["sim_id"], hex_to_f64(entry["params_hex"]))
    if t == "Ack":
        return wire.Ack(entry["ref_msg_type"])
    raise AssertionError(f"unknown fixture type {t}")


def golden_entries():
    with open(GOLDEN) as f:
        return json.load(f)["frames"]


def test_golden_frames_encode_and_decode():
    for entry in golden_entries():
        msg = build_from_fixture(entry)
        frame = bytes.fromhex(entry["frame_hex"])
        assert wire.encode(msg) == frame, entry["name"]
        assert wire.decode(frame) == msg, entry["name"]


def test_heartbeat_zero_crc_constant():
    # CRC-32/IEEE over sixteen zero bytes, independently verified.
    frame = wire.encode(wire.Heartbeat(0, 0))
    assert frame[:4] == b"MLSA"
    assert frame[4:6] == struct.pack("<H", 1)
    assert frame[6:8] == struct.pack("<H", wire.MSG_HEARTBEAT)
    assert frame[8:12] == struct.pack("<I", 16)
    assert frame[12:28] == bytes(16)
    assert struct.unpack("<I", frame[28:])[0] == 0xECBB4B55


def test_timestep_body_layout():
    frame = wire.encode(wire.Timestep(1, 0, [1.0]))
    body = frame[12:-4]
    assert body == bytes.fromhex("0100000000000000" "00000000" "01000000" "000000000000f03f")


def test_roundtrip_randomized():
    rng = np.random.default_rng(20240817)
    for _ in range(2000):
        msg = random_message(rng)
        frame = wire.encode(msg)
        assert wire.encode(msg) == frame  # encode is pure
        assert wire.decode(frame) == msg


def test_nan_payload_bits_survive():
    weird = struct.unpack("<d", struct.pack("<Q", 0x7FF0000000000001))[0]  # signaling NaN
    msg = wire.Timestep(9, 3, np.array([weird]))
    out = wire.decode(wire.encode(msg))
    assert out.values.tobytes() == msg.values.tobytes()


def test_bad_magic():
    frame = bytearray(wire.encode(wire.Ack(1)))
    frame[0] = ord("X")
    with pytest.raises(wire.BadMagic):
        wire.decode(bytes(frame))


def test_unsupported_version():
    frame = bytearray(wire.encode(wire.Ack(1)))
    frame[4:6] = struct.pack("<H", 2)
    with pytest.raises(wire.UnsupportedVersion):
        wire.decode(bytes(frame))


def test_truncated_inputs():
    with pytest.raises(wire.Truncated):
        wire.decode(b"")
    frame = wire.encode(wire.Bye(1, 2))
    for cut in (3, wire.HEADER_LEN, len(frame) - 1):
        with pytest.raises(wire.Truncated):
            wire.decode(frame[:cut])


def test_crc_mismatch_on_payload_bit_flip():
    frame = bytearray(wire.encode(wire.Timestep(1, 2, [3.0, 4.0])))
    frame[20] ^= 0x10  # inside the body
    with pytest.raises(wire.CrcMismatch):
        wire.decode(bytes(frame))


def test_unknown_msg_type():
    body = b""
    frame = struct.pack("<4sHHI", b"MLSA", 1, 99, 0) + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(wire.UnknownMsgType):
        wire.decode(frame)


def test_trailing_bytes_rejected():
    frame = wire.encode(wire.Ack(1)) + b"\x00"
    with pytest.raises(wire.WireError):
        wire.decode(frame)


def test_inconsistent_body_rejected():
    # param_count that points past the body end, CRC recomputed to pass.
    body = struct.pack("<QI", 1, 5) + struct.pack("<d", 1.0)
    frame = struct.pack("<4sHHI", b"MLSA", 1, wire.MSG_PARAM_ASSIGN, len(body))
    frame += body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(wire.MalformedBody):
        wire.decode(frame)


def test_encoding_limits():
    with pytest.raises(wire.EncodingLimit):
        wire.encode(wire.Bye(-1, 0))
    with pytest.raises(wire.EncodingLimit):
        wire.encode(wire.Bye(2**64, 0))
    with pytest.raises(wire.EncodingLimit):
        wire.encode(wire.Bye(1, 2**32))
    huge = np.broadcast_to(np.float64(0.0), (wire.MAX_ARRAY_LEN + 1,))
    with pytest.raises(wire.EncodingLimit):
        wire.encode(wire.Timestep(1, 0, huge))


def test_stream_decoder_reads_frames_in_order():
    msgs = [wire.Hello(1, 2, [3.0], (1,)), wire.Timestep(2, 0, [0.5]), wire.Bye(2, 0)]
    stream = io.BytesIO(b"".join(wire.encode(m) for m in msgs))
    dec = wire.StreamDecoder(stream)
    assert [dec.read() for _ in range(3)] == msgs
    assert dec.read() is None
    assert dec.read() is None  # EOF is not an error; stream stays usable


def test_stream_decoder_poisons_after_error():
    frame = bytearray(wire.encode(wire.Heartbeat(1, 2)))
    frame[15] ^= 0x01
    stream = io.BytesIO(bytes(frame) + wire.encode(wire.Ack(1)))
    dec = wire.StreamDecoder(stream)
    with pytest.raises(wire.CrcMismatch):
        dec.read()
    with pytest.raises(wire.StreamPoisoned):
        dec.read()


def test_stream_decoder_truncated_tail():
    frame = wire.encode(wire.Heartbeat(1, 2))
    dec = wire.StreamDecoder(io.BytesIO(frame[:-2]))
    with pytest.raises(wire.Truncated):
        dec.read()
    with pytest.raises(wire.StreamPoisoned):
        dec.read()
