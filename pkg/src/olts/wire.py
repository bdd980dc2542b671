"""Binary message framing for the client/server and launcher/server links.

Every message travels as one frame:

    offset  size  field
    ------  ----  -----------------------------------------
    0       4     magic, the ASCII bytes "MLSA"
    4       2     version, u16 little-endian, currently 1
    6       2     msg_type, u16 little-endian
    8       4     body_len, u32 little-endian, bytes in body
    12      n     body (layout depends on msg_type)
    12+n    4     CRC-32 (IEEE 802.3 polynomial) of the body

All integers are little-endian; all reals are IEEE-754 binary64
little-endian.  The CRC covers the body only: a corrupted header is
already caught by the magic/version checks.

Message bodies:

    Hello        client_id u64 | sim_id u64 | param_count u32 |
                 params f64[param_count] | field_shape_rank u32 |
                 field_shape u32[field_shape_rank]
    Timestep     sim_id u64 | t_index u32 | value_count u32 |
                 values f64[value_count]
    Bye          sim_id u64 | last_t u32
    Heartbeat    sender_id u64 | wallclock_ms u64
    ParamRequest count u32
    ParamAssign  sim_id u64 | param_count u32 | params f64[param_count]
    Ack          ref_msg_type u16

There is no resynchronization: any decode error poisons the stream and
the connection must be closed.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MLSA"
VERSION = 1

MSG_HELLO = 1
MSG_TIMESTEP = 2
MSG_BYE = 3
MSG_HEARTBEAT = 4
MSG_PARAM_REQUEST = 5
MSG_PARAM_ASSIGN = 6
MSG_ACK = 7

# Bye.last_t when the client finalizes without having sent any timestep.
EMPTY_TRAJECTORY = 0xFFFFFFFF

_HEADER = struct.Struct("<4sHHI")
_CRC = struct.Struct("<I")
HEADER_LEN = _HEADER.size

_U16_MAX = 2**16 - 1
_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1
# Keeps value_count/param_count comfortably inside u32 on every platform.
MAX_ARRAY_LEN = 2**31


class WireError(Exception):
    """Base class for every framing or codec failure."""


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class CrcMismatch(WireError):
    pass


class Truncated(WireError):
    pass


class UnknownMsgType(WireError):
    pass


class MalformedBody(WireError):
    """CRC-valid body whose fields do not add up to body_len."""


class EncodingLimit(WireError):
    """Message field exceeds what the frame format can carry."""


class StreamPoisoned(WireError):
    """Read attempted on a stream that already produced a decode error."""


def _f64(values) -> np.ndarray:
    a = np.asarray(values, dtype="<f8")
    if a.ndim != 1:
        a = a.reshape(-1)
    return a


def _check_u(name: str, value: int, limit: int) -> int:
    if not isinstance(value, (int, np.integer)):
        raise EncodingLimit(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if not 0 <= value <= limit:
        raise EncodingLimit(f"{name}={value} outside [0, {limit}]")
    return value


def _arrays_equal(a: np.ndarray, b: np.ndarray) -> bool:
    # Bitwise comparison: NaN payloads must round-trip too.
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(eq=False)
class Hello:
    """Announces one simulation: its identity, its λ, and the field shape."""

    client_id: int
    sim_id: int
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    field_shape: tuple = ()

    msg_type = MSG_HELLO

    def __post_init__(self):
        self.params = _f64(self.params)
        self.field_shape = tuple(int(d) for d in self.field_shape)

    def __eq__(self, other):
        return (
            isinstance(other, Hello)
            and self.client_id == other.client_id
            and self.sim_id == other.sim_id
            and self.field_shape == other.field_shape
            and _arrays_equal(self.params, other.params)
        )

    def _body(self) -> bytes:
        cid = _check_u("client_id", self.client_id, _U64_MAX)
        sid = _check_u("sim_id", self.sim_id, _U64_MAX)
        if len(self.params) > MAX_ARRAY_LEN:
            raise EncodingLimit(f"param_count {len(self.params)} exceeds {MAX_ARRAY_LEN}")
        if len(self.field_shape) > MAX_ARRAY_LEN:
            raise EncodingLimit("field_shape rank too large")
        dims = [_check_u("field_shape dim", d, _U32_MAX) for d in self.field_shape]
        return b"".join(
            (
                struct.pack("<QQI", cid, sid, len(self.params)),
                self.params.tobytes(),
                struct.pack("<I", len(dims)),
                struct.pack(f"<{len(dims)}I", *dims) if dims else b"",
            )
        )


@dataclass(eq=False)
class Timestep:
    """One solver output field u_t for a simulation."""

    sim_id: int
    t_index: int
    values: np.ndarray

    msg_type = MSG_TIMESTEP

    def __post_init__(self):
        self.values = _f64(self.values)

    def __eq__(self, other):
        return (
            isinstance(other, Timestep)
            and self.sim_id == other.sim_id
            and self.t_index == other.t_index
            and _arrays_equal(self.values, other.values)
        )

    def _body(self) -> bytes:
        sid = _check_u("sim_id", self.sim_id, _U64_MAX)
        t = _check_u("t_index", self.t_index, _U32_MAX)
        if len(self.values) > MAX_ARRAY_LEN:
            raise EncodingLimit(f"value_count {len(self.values)} exceeds {MAX_ARRAY_LEN}")
        return struct.pack("<QII", sid, t, len(self.values)) + self.values.tobytes()


@dataclass(frozen=True)
class Bye:
    """Marks a simulation complete; last_t is the final t_index sent."""

    sim_id: int
    last_t: int

    msg_type = MSG_BYE

    def _body(self) -> bytes:
        return struct.pack(
            "<QI",
            _check_u("sim_id", self.sim_id, _U64_MAX),
            _check_u("last_t", self.last_t, _U32_MAX),
        )


@dataclass(frozen=True)
class Heartbeat:
    sender_id: int
    wallclock_ms: int

    msg_type = MSG_HEARTBEAT

    def _body(self) -> bytes:
        return struct.pack(
            "<QQ",
            _check_u("sender_id", self.sender_id, _U64_MAX),
            _check_u("wallclock_ms", self.wallclock_ms, _U64_MAX),
        )


@dataclass(frozen=True)
class ParamRequest:
    count: int

    msg_type = MSG_PARAM_REQUEST

    def _body(self) -> bytes:
        return struct.pack("<I", _check_u("count", self.count, _U32_MAX))


@dataclass(eq=False)
class ParamAssign:
    """Assigns the λ vector for a new simulation instance."""

    sim_id: int
    params: np.ndarray

    msg_type = MSG_PARAM_ASSIGN

    def __post_init__(self):
        self.params = _f64(self.params)

    def __eq__(self, other):
        return (
            isinstance(other, ParamAssign)
            and self.sim_id == other.sim_id
            and _arrays_equal(self.params, other.params)
        )

    def _body(self) -> bytes:
        sid = _check_u("sim_id", self.sim_id, _U64_MAX)
        if len(self.params) > MAX_ARRAY_LEN:
            raise EncodingLimit(f"param_count {len(self.params)} exceeds {MAX_ARRAY_LEN}")
        return struct.pack("<QI", sid, len(self.params)) + self.params.tobytes()


@dataclass(frozen=True)
class Ack:
    ref_msg_type: int

    msg_type = MSG_ACK

    def _body(self) -> bytes:
        return struct.pack("<H", _check_u("ref_msg_type", self.ref_msg_type, _U16_MAX))


WireMessage = (Hello, Timestep, Bye, Heartbeat, ParamRequest, ParamAssign, Ack)

_TYPES = {cls.msg_type: cls for cls in WireMessage}


def encode(msg) -> bytes:
    """Frame a message as header + body + CRC-32 of the body."""
    if not isinstance(msg, WireMessage):
        raise EncodingLimit(f"not a wire message: {type(msg).__name__}")
    body = msg._body()
    header = _HEADER.pack(MAGIC, VERSION, msg.msg_type, len(body))
    return header + body + _CRC.pack(zlib.crc32(body))


class _BodyReader:
    """Sequential field reader over one CRC-checked body."""

    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        end = self.pos + s.size
        if end > len(self.body):
            raise MalformedBody("body ends inside a fixed field")
        out = s.unpack_from(self.body, self.pos)
        self.pos = end
        return out

    def take_f64_array(self, count: int) -> np.ndarray:
        end = self.pos + 8 * count
        if end > len(self.body):
            raise MalformedBody(f"body too short for {count} f64 values")
        a = np.frombuffer(self.body, dtype="<f8", count=count, offset=self.pos).copy()
        self.pos = end
        return a

    def finish(self):
        if self.pos != len(self.body):
            raise MalformedBody(f"{len(self.body) - self.pos} unread bytes in body")


def _decode_body(msg_type: int, body: bytes):
    r = _BodyReader(body)
    if msg_type == MSG_HELLO:
        client_id, sim_id, param_count = r.take("<QQI")
        params = r.take_f64_array(param_count)
        (rank,) = r.take("<I")
        shape = r.take(f"<{rank}I") if rank else ()
        msg = Hello(client_id, sim_id, params, shape)
    elif msg_type == MSG_TIMESTEP:
        sim_id, t_index, value_count = r.take("<QII")
        msg = Timestep(sim_id, t_index, r.take_f64_array(value_count))
    elif msg_type == MSG_BYE:
        msg = Bye(*r.take("<QI"))
    elif msg_type == MSG_HEARTBEAT:
        msg = Heartbeat(*r.take("<QQ"))
    elif msg_type == MSG_PARAM_REQUEST:
        msg = ParamRequest(*r.take("<I"))
    elif msg_type == MSG_PARAM_ASSIGN:
        sim_id, param_count = r.take("<QI")
        msg = ParamAssign(sim_id, r.take_f64_array(param_count))
    elif msg_type == MSG_ACK:
        msg = Ack(*r.take("<H"))
    else:
        raise UnknownMsgType(f"msg_type {msg_type}")
    r.finish()
    return msg


def _check_header(header: bytes):
    magic, version, msg_type, body_len = _HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    return msg_type, body_len


def decode(data: bytes):
    """Decode exactly one framed message; raise a WireError otherwise."""
    if len(data) < HEADER_LEN:
        raise Truncated(f"{len(data)} bytes, header needs {HEADER_LEN}")
    msg_type, body_len = _check_header(data[:HEADER_LEN])
    frame_len = HEADER_LEN + body_len + _CRC.size
    if len(data) < frame_len:
        raise Truncated(f"frame needs {frame_len} bytes, got {len(data)}")
    if len(data) > frame_len:
        raise MalformedBody(f"{len(data) - frame_len} bytes past end of frame")
    body = data[HEADER_LEN : HEADER_LEN + body_len]
    (crc,) = _CRC.unpack_from(data, HEADER_LEN + body_len)
    if crc != zlib.crc32(body):
        raise CrcMismatch(f"crc 0x{crc:08X} != 0x{zlib.crc32(body):08X}")
    if msg_type not in _TYPES:
        raise UnknownMsgType(f"msg_type {msg_type}")
    return _decode_body(msg_type, body)


class StreamDecoder:
    """Reads framed messages from a blocking binary stream.

    Any error poisons the decoder: there is no way to resynchronize a
    byte stream after a framing fault, so the caller must close the
    connection.  read() returns None on a clean EOF at a frame boundary.
    """

    def __init__(self, stream):
        self._stream = stream
        self._poison = None

    def _read_exact(self, n: int, at_boundary: bool):
        chunks = []
        got = 0
        while got < n:
            chunk = self._stream.read(n - got)
            if not chunk:
                if at_boundary and got == 0:
                    return None
                raise Truncated(f"stream ended {n - got} bytes early")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def read(self):
        if self._poison is not None:
            raise StreamPoisoned(f"stream poisoned by earlier {self._poison}")
        try:
            header = self._read_exact(HEADER_LEN, at_boundary=True)
            if header is None:
                return None
            msg_type, body_len = _check_header(header)
            body = self._read_exact(body_len, at_boundary=False)
            (crc,) = _CRC.unpack(self._read_exact(_CRC.size, at_boundary=False))
            if crc != zlib.crc32(body):
                raise CrcMismatch(f"crc 0x{crc:08X} != 0x{zlib.crc32(body):08X}")
            if msg_type not in _TYPES:
                raise UnknownMsgType(f"msg_type {msg_type}")
            return _decode_body(msg_type, body)
        except WireError as err:
            self._poison = type(err).__name__
            raise
