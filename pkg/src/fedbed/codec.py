"""Application data model and the framed wire encoding of protocol messages.

A frame is a 4-byte big-endian body length followed by the body, which is
canonical UTF-8 JSON of the form::

    {"type":T,"seq":S,"iter":I,"src":R,"data":D}

Keys appear in exactly that order with no whitespace. Map keys inside ``D``
are sorted, floats use the shortest round-tripping ``repr`` (which always
carries a ``.`` or an exponent) and non-ASCII text is written verbatim.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass
from typing import Any

from fedbed.errors import DecodeError, EncodeError, FrameError, ProtocolError

HEADER = struct.Struct("!I")
MAX_BODY = 2**31 - 1
INT_MIN, INT_MAX = -(2**63), 2**63 - 1

_ENVELOPE_KEYS = ("type", "seq", "iter", "src", "data")

_encoder = json.JSONEncoder(
    ensure_ascii=False,
    allow_nan=False,
    sort_keys=True,
    separators=(",", ":"),
)


class MsgType(str, enum.Enum):
    HELLO = "HELLO"
    CENTRAL_DATA = "CENTRAL_DATA"
    DECENTRAL = "DECENTRAL"


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    seq: int
    iter: int
    src: int
    data: Any = None

    def check(self, no_nodes: int | None = None) -> None:
        """Raise ProtocolError unless the header fields are mutually consistent."""
        if not isinstance(self.msg_type, MsgType):
            raise ProtocolError(f"unknown message type {self.msg_type!r}")
        for name in ("seq", "iter", "src"):
            v = getattr(self, name)
            if type(v) is not int:
                raise ProtocolError(f"{name} must be an int, got {type(v).__name__}")
        if self.msg_type is MsgType.DECENTRAL:
            if self.seq not in (1, 2):
                raise ProtocolError(f"DECENTRAL needs seq 1 or 2, got {self.seq}")
        elif self.seq != 0:
            raise ProtocolError(f"{self.msg_type.value} needs seq 0, got {self.seq}")
        if self.iter < 0:
            raise ProtocolError(f"negative iter {self.iter}")
        if self.src < 0 or (no_nodes is not None and self.src >= no_nodes):
            raise ProtocolError(f"src {self.src} out of range for {no_nodes} nodes")
        if self.msg_type is MsgType.HELLO and self.data is not None:
            raise ProtocolError("HELLO carries no data")


def check_value(value: Any, _path: str = "data") -> None:
    """Raise EncodeError if ``value`` is not a well-formed FLValue.

    Tuples are accepted and travel as lists.
    """
    if value is None or isinstance(value, (bool, str)):
        if isinstance(value, str):
            try:
                value.encode("utf-8")
            except UnicodeEncodeError as exc:
                raise EncodeError(f"{_path}: string is not valid UTF-8") from exc
        return
    if isinstance(value, int):
        if not INT_MIN <= value <= INT_MAX:
            raise EncodeError(f"{_path}: integer {value} outside the 64-bit range")
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise EncodeError(f"{_path}: non-finite float {value!r}")
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            check_value(item, f"{_path}[{i}]")
        return
    if isinstance(value, dict):
        for k, item in value.items():
            if not isinstance(k, str):
                raise EncodeError(f"{_path}: map key {k!r} is not a string")
            check_value(k, f"{_path} key")
            check_value(item, f"{_path}[{k!r}]")
        return
    raise EncodeError(f"{_path}: {type(value).__name__} is not a valid FL value")


def _normalize(value):
    # int/float subclasses (numpy scalars excluded) and tuples collapse to plain kinds
    if value is None or type(value) in (bool, str, int, float):
        return value
    if isinstance(value, bool):
        return bool(value)
    if isinstance(value, int):
        return int(value)
    if isinstance(value, float):
        return float(value)
    if isinstance(value, str):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    return {str(k): _normalize(v) for k, v in value.items()}


def dumps_value(value: Any) -> str:
    """Canonical text of an FLValue (the ``data`` grammar, also used in traces)."""
    check_value(value)
    try:
        return _encoder.encode(_normalize(value))
    except (ValueError, TypeError) as exc:
        raise EncodeError(str(exc)) from exc


def _reject_constant(name):
    raise DecodeError(f"non-finite number {name} is not allowed")


def _no_duplicates(pairs):
    obj = {}
    for k, v in pairs:
        if k in obj:
            raise DecodeError(f"duplicate key {k!r}")
        obj[k] = v
    return obj


def _check_decoded(value, path="data"):
    if isinstance(value, bool) or value is None or isinstance(value, (str, float)):
        return
    if isinstance(value, int):
        if not INT_MIN <= value <= INT_MAX:
            raise DecodeError(f"{path}: integer outside the 64-bit range")
        return
    if isinstance(value, list):
        for i, item in enumerate(value):
            _check_decoded(item, f"{path}[{i}]")
        return
    for k, item in value.items():
        _check_decoded(item, f"{path}[{k!r}]")


def loads_value(text: str) -> Any:
    try:
        value = json.loads(
            text, parse_constant=_reject_constant, object_pairs_hook=_no_duplicates
        )
    except DecodeError:
        raise
    except (ValueError, RecursionError) as exc:
        raise DecodeError(f"malformed value: {exc}") from exc
    _check_decoded(value)
    return value


def encode(env: Envelope) -> bytes:
    env.check()
    data = dumps_value(env.data)
    body = (
        f'{{"type":"{env.msg_type.value}","seq":{env.seq},"iter":{env.iter},'
        f'"src":{env.src},"data":{data}}}'
    ).encode("utf-8")
    if len(body) > MAX_BODY:
        raise EncodeError(f"body of {len(body)} bytes exceeds the frame limit")
    return HEADER.pack(len(body)) + body


def body_length(header: bytes) -> int:
    """Body length announced by a 4-byte header."""
    if len(header) != HEADER.size:
        raise FrameError(f"header needs {HEADER.size} bytes, got {len(header)}")
    (n,) = HEADER.unpack(header)
    if n > MAX_BODY:
        raise FrameError(f"announced body length {n} exceeds the frame limit")
    return n


def decode(frame: bytes, no_nodes: int | None = None) -> Envelope:
    """Parse one complete frame.

    Raises FrameError for a truncated or over-long frame, DecodeError for a
    body that is not a well-typed envelope, and ProtocolError when the
    header fields contradict each other or ``src`` is out of range.
    """
    frame = bytes(frame)
    n = body_length(frame[: HEADER.size])
    if len(frame) - HEADER.size != n:
        raise FrameError(f"frame announces {n} body bytes, has {len(frame) - HEADER.size}")
    try:
        text = frame[HEADER.size :].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"body is not UTF-8: {exc}") from exc
    obj = loads_value(text)
    if not isinstance(obj, dict) or set(obj) != set(_ENVELOPE_KEYS):
        raise DecodeError(f"body must be an object with keys {_ENVELOPE_KEYS}")
    try:
        msg_type = MsgType(obj["type"])
    except (ValueError, TypeError) as exc:
        raise DecodeError(f"unknown message type {obj['type']!r}") from exc
    for name in ("seq", "iter", "src"):
        if type(obj[name]) is not int:
            raise DecodeError(f"{name} must be an integer")
    env = Envelope(msg_type, obj["seq"], obj["iter"], obj["src"], obj["data"])
    env.check(no_nodes)
    return env
