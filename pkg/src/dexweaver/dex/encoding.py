"""Primitive encodings used by the DEX format: LEB128 variants and MUTF-8."""

from __future__ import annotations

import struct

from ..errors import DexFormatError, TruncatedFile


def uleb128(value: int) -> bytes:
    if value < 0:
        raise ValueError("uleb128 of negative value")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def sleb128(value: int) -> bytes:
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        done = (value == 0 and not byte & 0x40) or (value == -1 and byte & 0x40)
        out.append(byte if done else byte | 0x80)
        if done:
            return bytes(out)


def uleb128p1(value: int) -> bytes:
    return uleb128(value + 1)


def mutf8_encode(text: str) -> tuple[bytes, int]:
    """Encode to modified UTF-8; returns (bytes, utf16 code unit count)."""
    raw = text.encode("utf-16-le", "surrogatepass")
    units = struct.unpack(f"<{len(raw) // 2}H", raw)
    out = bytearray()
    for u in units:
        if 0 < u < 0x80:
            out.append(u)
        elif u < 0x800:
            out.append(0xC0 | (u >> 6))
            out.append(0x80 | (u & 0x3F))
        else:
            out.append(0xE0 | (u >> 12))
            out.append(0x80 | ((u >> 6) & 0x3F))
            out.append(0x80 | (u & 0x3F))
    return bytes(out), len(units)


def mutf8_decode(data: bytes, utf16_size: int) -> str:
    units = []
    i = 0
    n = len(data)
    try:
        while len(units) < utf16_size:
            b = data[i]
            if b < 0x80:
                if b == 0:
                    raise DexFormatError("NUL byte inside MUTF-8 string")
                units.append(b)
                i += 1
            elif b & 0xE0 == 0xC0:
                units.append(((b & 0x1F) << 6) | (data[i + 1] & 0x3F))
                i += 2
            elif b & 0xF0 == 0xE0:
                units.append(((b & 0x0F) << 12) | ((data[i + 1] & 0x3F) << 6) | (data[i + 2] & 0x3F))
                i += 3
            else:
                raise DexFormatError(f"bad MUTF-8 lead byte 0x{b:02x}")
    except IndexError:
        raise TruncatedFile("string data runs past end of file") from None
    if i >= n or data[i] != 0:
        raise DexFormatError("MUTF-8 string is not NUL terminated where its length says")
    return struct.pack(f"<{len(units)}H", *units).decode("utf-16-le", "surrogatepass")


def utf16_sort_key(text: str) -> bytes:
    # Big-endian UTF-16 bytes compare in code-unit order.
    return text.encode("utf-16-be", "surrogatepass")


class Reader:
    """Bounds-checked little-endian cursor over an immutable buffer."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def _need(self, n: int) -> None:
        if self.pos < 0 or self.pos + n > len(self.data):
            raise TruncatedFile(f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")

    def u1(self) -> int:
        self._need(1)
        v = self.data[self.pos]
        self.pos += 1
        return v

    def u2(self) -> int:
        self._need(2)
        v = int.from_bytes(self.data[self.pos:self.pos + 2], "little")
        self.pos += 2
        return v

    def u4(self) -> int:
        self._need(4)
        v = int.from_bytes(self.data[self.pos:self.pos + 4], "little")
        self.pos += 4
        return v

    def raw(self, n: int) -> bytes:
        self._need(n)
        v = self.data[self.pos:self.pos + n]
        self.pos += n
        return bytes(v)

    def uleb128(self) -> int:
        result = 0
        shift = 0
        while True:
            b = self.u1()
            result |= (b & 0x7F) << shift
            shift += 7
            if not b & 0x80:
                return result
            if shift > 35:
                raise DexFormatError("uleb128 longer than 5 bytes")

    def sleb128(self) -> int:
        result = 0
        shift = 0
        while True:
            b = self.u1()
            result |= (b & 0x7F) << shift
            shift += 7
            if not b & 0x80:
                if b & 0x40:
                    result -= 1 << shift
                return result
            if shift > 35:
                raise DexFormatError("sleb128 longer than 5 bytes")

    def uleb128p1(self) -> int:
        return self.uleb128() - 1
