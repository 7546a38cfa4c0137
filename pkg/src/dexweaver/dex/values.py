"""Encoded values, annotations and debug info.

These sections carry pool indices, so they are decoded into small value
objects instead of raw byte runs; that way they survive pool growth by
remapping, and re-encode canonically.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import DexFormatError
from .encoding import Reader, sleb128, uleb128, uleb128p1

NO_INDEX = 0xFFFFFFFF

VALUE_BYTE = 0x00
VALUE_SHORT = 0x02
VALUE_CHAR = 0x03
VALUE_INT = 0x04
VALUE_LONG = 0x06
VALUE_FLOAT = 0x10
VALUE_DOUBLE = 0x11
VALUE_METHOD_TYPE = 0x15
VALUE_METHOD_HANDLE = 0x16
VALUE_STRING = 0x17
VALUE_TYPE = 0x18
VALUE_FIELD = 0x19
VALUE_METHOD = 0x1A
VALUE_ENUM = 0x1B
VALUE_ARRAY = 0x1C
VALUE_ANNOTATION = 0x1D
VALUE_NULL = 0x1E
VALUE_BOOLEAN = 0x1F

_SIGNED = {VALUE_BYTE: 1, VALUE_SHORT: 2, VALUE_INT: 4, VALUE_LONG: 8}
_FLOATING = {VALUE_FLOAT: 4, VALUE_DOUBLE: 8}
_INDEXED = {
    VALUE_METHOD_TYPE: "proto",
    VALUE_STRING: "string",
    VALUE_TYPE: "type",
    VALUE_FIELD: "field",
    VALUE_METHOD: "method",
    VALUE_ENUM: "field",
}


class Remap:
    """Old-index to new-index tables for each pool; ``None`` means identity."""

    def __init__(self, string=None, type=None, proto=None, field=None, method=None):
        self.tables = {"string": string, "type": type, "proto": proto, "field": field, "method": method}

    def __call__(self, kind: str, index: int) -> int:
        if index == NO_INDEX:
            return index
        table = self.tables[kind]
        return index if table is None else table[index]

    @property
    def identity(self) -> bool:
        return all(t is None for t in self.tables.values())


@dataclass(frozen=True)
class EncodedValue:
    tag: int
    value: object = None

    def remapped(self, remap: Remap) -> EncodedValue:
        if self.tag in _INDEXED:
            return EncodedValue(self.tag, remap(_INDEXED[self.tag], self.value))
        if self.tag == VALUE_ARRAY:
            return EncodedValue(self.tag, tuple(v.remapped(remap) for v in self.value))
        if self.tag == VALUE_ANNOTATION:
            return EncodedValue(self.tag, self.value.remapped(remap))
        return self


@dataclass(frozen=True)
class EncodedAnnotation:
    type_idx: int
    elements: tuple[tuple[int, EncodedValue], ...] = ()

    def remapped(self, remap: Remap) -> EncodedAnnotation:
        return EncodedAnnotation(
            remap("type", self.type_idx),
            tuple((remap("string", n), v.remapped(remap)) for n, v in self.elements),
        )


@dataclass(frozen=True)
class Annotation:
    visibility: int
    annotation: EncodedAnnotation

    def remapped(self, remap: Remap) -> Annotation:
        return Annotation(self.visibility, self.annotation.remapped(remap))


AnnotationSet = tuple  # tuple[Annotation, ...]


def _remap_set(s, remap):
    return None if s is None else tuple(a.remapped(remap) for a in s)


@dataclass(frozen=True)
class AnnotationsDirectory:
    class_annotations: tuple | None = None
    fields: tuple = ()       # ((field_idx, AnnotationSet), ...)
    methods: tuple = ()      # ((method_idx, AnnotationSet), ...)
    parameters: tuple = ()   # ((method_idx, (AnnotationSet | None, ...)), ...)

    def remapped(self, remap: Remap) -> AnnotationsDirectory:
        return AnnotationsDirectory(
            _remap_set(self.class_annotations, remap),
            tuple((remap("field", i), _remap_set(s, remap)) for i, s in self.fields),
            tuple((remap("method", i), _remap_set(s, remap)) for i, s in self.methods),
            tuple((remap("method", i), tuple(_remap_set(s, remap) for s in sets))
                  for i, sets in self.parameters),
        )


# -- encoded value codec ----------------------------------------------------

def read_value(r: Reader) -> EncodedValue:
    header = r.u1()
    tag = header & 0x1F
    arg = header >> 5
    if tag in _SIGNED:
        size = arg + 1
        if size > _SIGNED[tag]:
            raise DexFormatError(f"encoded value 0x{tag:02x} too wide")
        return EncodedValue(tag, int.from_bytes(r.raw(size), "little", signed=True))
    if tag == VALUE_CHAR or tag in _INDEXED:
        size = arg + 1
        return EncodedValue(tag, int.from_bytes(r.raw(size), "little"))
    if tag in _FLOATING:
        width = _FLOATING[tag]
        size = arg + 1
        if size > width:
            raise DexFormatError("encoded float too wide")
        return EncodedValue(tag, int.from_bytes(r.raw(size), "little") << (8 * (width - size)))
    if tag == VALUE_ARRAY:
        return EncodedValue(tag, read_array(r))
    if tag == VALUE_ANNOTATION:
        return EncodedValue(tag, read_annotation(r))
    if tag == VALUE_NULL:
        return EncodedValue(tag, None)
    if tag == VALUE_BOOLEAN:
        return EncodedValue(tag, bool(arg))
    raise DexFormatError(f"unsupported encoded value type 0x{tag:02x}")


def read_array(r: Reader) -> tuple:
    return tuple(read_value(r) for _ in range(r.uleb128()))


def read_annotation(r: Reader) -> EncodedAnnotation:
    type_idx = r.uleb128()
    elements = []
    for _ in range(r.uleb128()):
        name = r.uleb128()
        elements.append((name, read_value(r)))
    return EncodedAnnotation(type_idx, tuple(elements))


def _min_signed(v: int) -> int:
    n = 1
    while not -(1 << (8 * n - 1)) <= v < (1 << (8 * n - 1)):
        n += 1
    return n


def _min_unsigned(v: int) -> int:
    n = 1
    while v >= (1 << (8 * n)):
        n += 1
    return n


def write_value(v: EncodedValue) -> bytes:
    tag = v.tag
    if tag in _SIGNED:
        n = _min_signed(v.value)
        return bytes([((n - 1) << 5) | tag]) + v.value.to_bytes(n, "little", signed=True)
    if tag == VALUE_CHAR or tag in _INDEXED:
        n = _min_unsigned(v.value)
        return bytes([((n - 1) << 5) | tag]) + v.value.to_bytes(n, "little")
    if tag in _FLOATING:
        width = _FLOATING[tag]
        raw = v.value.to_bytes(width, "little")
        n = width
        while n > 1 and raw[width - n] == 0:
            n -= 1
        return bytes([((n - 1) << 5) | tag]) + raw[width - n:]
    if tag == VALUE_ARRAY:
        return bytes([tag]) + write_array(v.value)
    if tag == VALUE_ANNOTATION:
        return bytes([tag]) + write_annotation(v.value)
    if tag == VALUE_NULL:
        return bytes([tag])
    if tag == VALUE_BOOLEAN:
        return bytes([(int(bool(v.value)) << 5) | tag])
    raise DexFormatError(f"unsupported encoded value type 0x{tag:02x}")


def write_array(values) -> bytes:
    return uleb128(len(values)) + b"".join(write_value(v) for v in values)


def write_annotation(a: EncodedAnnotation) -> bytes:
    out = bytearray(uleb128(a.type_idx) + uleb128(len(a.elements)))
    for name, value in a.elements:
        out += uleb128(name) + write_value(value)
    return bytes(out)


# -- debug info -------------------------------------------------------------

DBG_END_SEQUENCE = 0x00
DBG_ADVANCE_PC = 0x01
DBG_ADVANCE_LINE = 0x02
DBG_START_LOCAL = 0x03
DBG_START_LOCAL_EXTENDED = 0x04
DBG_END_LOCAL = 0x05
DBG_RESTART_LOCAL = 0x06
DBG_SET_PROLOGUE_END = 0x07
DBG_SET_EPILOGUE_BEGIN = 0x08
DBG_SET_FILE = 0x09


def _p1(v: int) -> int:
    return NO_INDEX if v == -1 else v


def _unp1(v: int) -> int:
    return -1 if v == NO_INDEX else v


@dataclass(frozen=True)
class DebugInfo:
    """Decoded debug_info_item; ``ops`` are tuples ``(opcode, *args)``."""

    line_start: int
    parameter_names: tuple[int, ...]
    ops: tuple[tuple[int, ...], ...]

    def remapped(self, remap: Remap) -> DebugInfo:
        ops = []
        for op in self.ops:
            code = op[0]
            if code == DBG_START_LOCAL:
                ops.append((code, op[1], remap("string", op[2]), remap("type", op[3])))
            elif code == DBG_START_LOCAL_EXTENDED:
                ops.append((code, op[1], remap("string", op[2]), remap("type", op[3]), remap("string", op[4])))
            elif code == DBG_SET_FILE:
                ops.append((code, remap("string", op[1])))
            else:
                ops.append(op)
        return DebugInfo(self.line_start, tuple(remap("string", n) for n in self.parameter_names), tuple(ops))


def read_debug_info(r: Reader) -> DebugInfo:
    line_start = r.uleb128()
    names = tuple(_p1(r.uleb128p1()) for _ in range(r.uleb128()))
    ops = []
    while True:
        code = r.u1()
        if code == DBG_END_SEQUENCE:
            break
        if code in (DBG_ADVANCE_PC, DBG_END_LOCAL, DBG_RESTART_LOCAL):
            ops.append((code, r.uleb128()))
        elif code == DBG_ADVANCE_LINE:
            ops.append((code, r.sleb128()))
        elif code == DBG_START_LOCAL:
            ops.append((code, r.uleb128(), _p1(r.uleb128p1()), _p1(r.uleb128p1())))
        elif code == DBG_START_LOCAL_EXTENDED:
            ops.append((code, r.uleb128(), _p1(r.uleb128p1()), _p1(r.uleb128p1()), _p1(r.uleb128p1())))
        elif code == DBG_SET_FILE:
            ops.append((code, _p1(r.uleb128p1())))
        else:
            ops.append((code,))
    return DebugInfo(line_start, names, tuple(ops))


def write_debug_info(d: DebugInfo) -> bytes:
    out = bytearray(uleb128(d.line_start) + uleb128(len(d.parameter_names)))
    for n in d.parameter_names:
        out += uleb128p1(_unp1(n))
    for op in d.ops:
        code = op[0]
        out.append(code)
        if code in (DBG_ADVANCE_PC, DBG_END_LOCAL, DBG_RESTART_LOCAL):
            out += uleb128(op[1])
        elif code == DBG_ADVANCE_LINE:
            out += sleb128(op[1])
        elif code == DBG_START_LOCAL:
            out += uleb128(op[1]) + uleb128p1(_unp1(op[2])) + uleb128p1(_unp1(op[3]))
        elif code == DBG_START_LOCAL_EXTENDED:
            out += uleb128(op[1]) + b"".join(uleb128p1(_unp1(x)) for x in op[2:5])
        elif code == DBG_SET_FILE:
            out += uleb128p1(_unp1(op[1]))
    out.append(DBG_END_SEQUENCE)
    return bytes(out)
