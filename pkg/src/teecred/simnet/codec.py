"""Canonical wire encoding.

Every value is a one-byte tag followed by its payload.  Integers are unsigned
64-bit big-endian, byte and text strings are u32-length-prefixed, and
registered dataclasses are written field by field in declaration order.
Mappings and sets are sorted by the encoding of their keys, so equal values
always encode to equal bytes.  ``decode`` is total over arbitrary input: it
either returns a well-typed value or raises :class:`DecodeError`.
"""

from __future__ import annotations

import dataclasses
import enum
import struct
import types
import typing
from typing import Any, Callable

from ..crypto import Secret

_NONE, _BOOL, _INT, _BYTES, _STR, _LIST, _STRUCT, _ENUM, _MAP, _SET = range(10)
_MAX_DEPTH = 32
_U64_MAX = (1 << 64) - 1


class EncodeError(TypeError):
    pass


class DecodeError(ValueError):
    pass


_by_id: dict[int, type] = {}
_by_type: dict[type, int] = {}
_hints: dict[type, dict[str, Any]] = {}


def wire(type_id: int) -> Callable[[type], type]:
    """Register a dataclass or Enum under a stable numeric wire id."""

    def register(cls: type) -> type:
        if type_id in _by_id and _by_id[type_id] is not cls:
            raise ValueError(f"wire id {type_id} already used by {_by_id[type_id].__name__}")
        if not (dataclasses.is_dataclass(cls) or issubclass(cls, enum.Enum)):
            raise TypeError("only dataclasses and enums can be registered")
        _by_id[type_id] = cls
        _by_type[cls] = type_id
        return cls

    return register


def encode(value: Any) -> bytes:
    out = bytearray()
    _enc(value, out, 0)
    return bytes(out)


def decode(data: bytes, expected: type | None = None) -> Any:
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise DecodeError("input must be bytes")
    buf = memoryview(bytes(data))
    try:
        value, pos = _dec(buf, 0, 0)
    except DecodeError:
        raise
    except (struct.error, UnicodeDecodeError, ValueError, TypeError, KeyError, OverflowError) as exc:
        raise DecodeError(f"malformed input: {exc}") from exc
    if pos != len(buf):
        raise DecodeError(f"{len(buf) - pos} trailing bytes")
    if expected is not None and not isinstance(value, expected):
        raise DecodeError(f"expected {expected.__name__}, got {type(value).__name__}")
    return value


def _enc(value: Any, out: bytearray, depth: int) -> None:
    if depth > _MAX_DEPTH:
        raise EncodeError("value nested too deeply")
    if isinstance(value, Secret):
        raise EncodeError("secret values never go on the wire")
    if value is None:
        out.append(_NONE)
    elif isinstance(value, bool):
        out += bytes((_BOOL, 1 if value else 0))
    elif isinstance(value, enum.Enum):
        tid = _by_type.get(type(value))
        if tid is None:
            raise EncodeError(f"unregistered enum {type(value).__name__}")
        out.append(_ENUM)
        out += struct.pack(">H", tid)
        _enc_str(str(value.value), out)
    elif isinstance(value, int):
        if not 0 <= value <= _U64_MAX:
            raise EncodeError(f"integer out of u64 range: {value}")
        out.append(_INT)
        out += struct.pack(">Q", value)
    elif isinstance(value, (bytes, bytearray)):
        out.append(_BYTES)
        out += struct.pack(">I", len(value))
        out += value
    elif isinstance(value, str):
        out.append(_STR)
        _enc_str(value, out)
    elif isinstance(value, (list, tuple)):
        out.append(_LIST)
        out += struct.pack(">I", len(value))
        for item in value:
            _enc(item, out, depth + 1)
    elif isinstance(value, (set, frozenset)):
        items = sorted(encode(v) for v in value)
        out.append(_SET)
        out += struct.pack(">I", len(items))
        for item in items:
            out += item
    elif isinstance(value, dict):
        pairs = sorted((encode(k), v) for k, v in value.items())
        out.append(_MAP)
        out += struct.pack(">I", len(pairs))
        for k, v in pairs:
            out += k
            _enc(v, out, depth + 1)
    elif dataclasses.is_dataclass(value):
        tid = _by_type.get(type(value))
        if tid is None:
            raise EncodeError(f"unregistered type {type(value).__name__}")
        out.append(_STRUCT)
        out += struct.pack(">H", tid)
        for f in dataclasses.fields(value):
            _enc(getattr(value, f.name), out, depth + 1)
    else:
        raise EncodeError(f"cannot encode {type(value).__name__}")


def _enc_str(s: str, out: bytearray) -> None:
    raw = s.encode("utf-8")
    out += struct.pack(">I", len(raw))
    out += raw


def _take(buf: memoryview, pos: int, n: int) -> tuple[bytes, int]:
    if n < 0 or pos + n > len(buf):
        raise DecodeError("truncated input")
    return bytes(buf[pos : pos + n]), pos + n


def _count(buf: memoryview, pos: int) -> tuple[int, int]:
    raw, pos = _take(buf, pos, 4)
    n = struct.unpack(">I", raw)[0]
    # every element needs at least one byte
    if n > len(buf) - pos:
        raise DecodeError("length prefix exceeds input")
    return n, pos


def _dec(buf: memoryview, pos: int, depth: int) -> tuple[Any, int]:
    if depth > _MAX_DEPTH:
        raise DecodeError("input nested too deeply")
    raw, pos = _take(buf, pos, 1)
    tag = raw[0]
    if tag == _NONE:
        return None, pos
    if tag == _BOOL:
        raw, pos = _take(buf, pos, 1)
        if raw[0] > 1:
            raise DecodeError("bad boolean")
        return raw[0] == 1, pos
    if tag == _INT:
        raw, pos = _take(buf, pos, 8)
        return struct.unpack(">Q", raw)[0], pos
    if tag in (_BYTES, _STR):
        n, pos = _count(buf, pos)
        raw, pos = _take(buf, pos, n)
        return (raw if tag == _BYTES else raw.decode("utf-8")), pos
    if tag == _LIST:
        n, pos = _count(buf, pos)
        items = []
        for _ in range(n):
            item, pos = _dec(buf, pos, depth + 1)
            items.append(item)
        return tuple(items), pos
    if tag == _SET:
        n, pos = _count(buf, pos)
        items, prev = [], None
        for _ in range(n):
            start = pos
            item, pos = _dec(buf, pos, depth + 1)
            enc = bytes(buf[start:pos])
            if prev is not None and enc <= prev:
                raise DecodeError("set elements not in canonical order")
            prev = enc
            items.append(item)
        return frozenset(items), pos
    if tag == _MAP:
        n, pos = _count(buf, pos)
        result, prev = {}, None
        for _ in range(n):
            start = pos
            key, pos = _dec(buf, pos, depth + 1)
            enc = bytes(buf[start:pos])
            if prev is not None and enc <= prev:
                raise DecodeError("map keys not in canonical order")
            prev = enc
            result[key], pos = _dec(buf, pos, depth + 1)
        return result, pos
    if tag == _ENUM:
        raw, pos = _take(buf, pos, 2)
        cls = _lookup(struct.unpack(">H", raw)[0])
        if not issubclass(cls, enum.Enum):
            raise DecodeError(f"wire id names non-enum {cls.__name__}")
        n, pos = _count(buf, pos)
        raw, pos = _take(buf, pos, n)
        return cls(raw.decode("utf-8")), pos
    if tag == _STRUCT:
        raw, pos = _take(buf, pos, 2)
        cls = _lookup(struct.unpack(">H", raw)[0])
        if not dataclasses.is_dataclass(cls):
            raise DecodeError(f"wire id names non-struct {cls.__name__}")
        hints = _type_hints(cls)
        kwargs = {}
        for f in dataclasses.fields(cls):
            value, pos = _dec(buf, pos, depth + 1)
            if not _conforms(value, hints.get(f.name, Any)):
                raise DecodeError(f"{cls.__name__}.{f.name}: unexpected {type(value).__name__}")
            kwargs[f.name] = value
        try:
            return cls(**kwargs), pos
        except DecodeError:
            raise
        except Exception as exc:  # constructor validation
            raise DecodeError(f"invalid {cls.__name__}: {exc}") from exc
    raise DecodeError(f"unknown tag {tag:#x}")


def _lookup(tid: int) -> type:
    cls = _by_id.get(tid)
    if cls is None:
        raise DecodeError(f"unknown wire id {tid}")
    return cls


def _type_hints(cls: type) -> dict[str, Any]:
    hints = _hints.get(cls)
    if hints is None:
        hints = typing.get_type_hints(cls)
        _hints[cls] = hints
    return hints


def _conforms(value: Any, hint: Any) -> bool:
    if hint is Any:
        return True
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_conforms(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is bytes:
        return isinstance(value, bytes)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint in (str, bool):
        return isinstance(value, hint)
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, tuple):
            return False
        if len(args) == 2 and args[1] is Ellipsis:
            return all(_conforms(v, args[0]) for v in value)
        return len(args) == len(value) and all(_conforms(v, a) for v, a in zip(value, args))
    if origin is frozenset:
        (arg,) = typing.get_args(hint)
        return isinstance(value, frozenset) and all(_conforms(v, arg) for v in value)
    if origin is dict:
        k, v = typing.get_args(hint)
        return isinstance(value, dict) and all(
            _conforms(a, k) and _conforms(b, v) for a, b in value.items()
        )
    if isinstance(hint, type):
        return isinstance(value, hint)
    return True
