"""DEX container parser."""

from __future__ import annotations

import hashlib
import sys
import zlib
from array import array

from .. import budget as _b
from ..budget import MemoryTracker
from ..errors import BadMagic, DexFormatError, DigestMismatch, MalformedCode, MalformedIndex, TruncatedFile
from .encoding import Reader, mutf8_decode
from .model import (
    CATCH_ALL, ClassDef, CodeItem, DexFile, DexHeader, EncodedField, EncodedMethod, FieldId,
    Handler, MethodId, ProtoId, TryItem,
)
from .opcodes import decode_all
from .values import NO_INDEX, Annotation, AnnotationsDirectory, read_annotation, read_array, read_debug_info

HEADER_SIZE = 0x70
ENDIAN_CONSTANT = 0x12345678

# map item types this toolchain does not model (DEX 038+ additions)
_UNSUPPORTED_MAP_TYPES = {0x0007: "call_site_id", 0x0008: "method_handle", 0xF000: "hiddenapi_class_data"}


def parse_dex(data: bytes, *, verify_digests: bool = True, tracker: MemoryTracker | None = None) -> DexFile:
    """Parse a complete DEX file into a :class:`DexFile`.

    With a ``tracker``, every model node is charged against its ceiling and
    :class:`BudgetExceeded` aborts the parse as soon as it is crossed.
    """
    data = bytes(data)
    if tracker is not None:
        tracker.charge(len(data))
    if len(data) < HEADER_SIZE:
        if not data.startswith(b"dex\n"[:len(data)]):
            raise BadMagic(f"bad magic {data[:8]!r}")
        raise TruncatedFile(f"{len(data)} bytes is shorter than the DEX header")
    magic = data[:8]
    if magic[:4] != b"dex\n" or magic[7] != 0 or not magic[4:7].isdigit():
        raise BadMagic(f"bad magic {magic!r}")
    r = Reader(data)
    r.pos = 8
    checksum = r.u4()
    signature = r.raw(20)
    file_size = r.u4()
    header_size = r.u4()
    endian = r.u4()
    if endian != ENDIAN_CONSTANT:
        raise DexFormatError(f"unsupported endian tag 0x{endian:08x}")
    if header_size != HEADER_SIZE:
        raise DexFormatError(f"unexpected header size {header_size}")
    if file_size > len(data):
        raise TruncatedFile(f"header declares {file_size} bytes, got {len(data)}")
    if file_size < len(data):
        data = data[:file_size]
    if verify_digests:
        if zlib.adler32(data[12:]) != checksum:
            raise DigestMismatch("checksum does not match file content")
        if hashlib.sha1(data[32:]).digest() != signature:
            raise DigestMismatch("SHA-1 signature does not match file content")
    names = ["link_size", "link_off", "map_off", "string_ids_size", "string_ids_off",
             "type_ids_size", "type_ids_off", "proto_ids_size", "proto_ids_off",
             "field_ids_size", "field_ids_off", "method_ids_size", "method_ids_off",
             "class_defs_size", "class_defs_off", "data_size", "data_off"]
    offsets = {n: r.u4() for n in names}
    header = DexHeader(magic[4:7].decode("ascii"), checksum, signature, file_size, offsets)
    return _Parser(data, header, tracker).run()


class _Parser:
    def __init__(self, data: bytes, header: DexHeader, tracker: MemoryTracker | None):
        self.data = data
        self.h = header.offsets
        self.header = header
        self.tracker = tracker

    def charge(self, n: int) -> None:
        if self.tracker is not None:
            self.tracker.charge(n)

    def at(self, off: int) -> Reader:
        if not 0 <= off <= len(self.data):
            raise TruncatedFile(f"offset {off} outside file of {len(self.data)} bytes")
        return Reader(self.data, off)

    def run(self) -> DexFile:
        self._check_map()
        h = self.h
        strings = []
        r = self.at(h["string_ids_off"])
        for _ in range(h["string_ids_size"]):
            sr = self.at(r.u4())
            n = sr.uleb128()
            end = self.data.find(b"\0", sr.pos)
            if end < 0:
                raise TruncatedFile("unterminated string data")
            text = mutf8_decode(self.data[sr.pos:end + 1], n)
            self.charge(_b.string_cost(text))
            strings.append(text)
        ns = len(strings)

        r = self.at(h["type_ids_off"])
        types = [r.u4() for _ in range(h["type_ids_size"])]
        self.charge(_b.POOL_ITEM_COST * len(types))
        _range(types, ns, "type descriptor")
        nt = len(types)

        protos = []
        r = self.at(h["proto_ids_off"])
        for _ in range(h["proto_ids_size"]):
            shorty_idx, ret, params_off = r.u4(), r.u4(), r.u4()
            params = self._type_list(params_off)
            _range((shorty_idx,), ns, "proto shorty")
            _range((ret,) + params, nt, "proto type")
            protos.append(ProtoId(shorty_idx, ret, params))
        self.charge(_b.POOL_ITEM_COST * len(protos))

        fields = []
        r = self.at(h["field_ids_off"])
        for _ in range(h["field_ids_size"]):
            fields.append(FieldId(r.u2(), r.u2(), r.u4()))
        self.charge(_b.POOL_ITEM_COST * len(fields))

        methods = []
        r = self.at(h["method_ids_off"])
        for _ in range(h["method_ids_size"]):
            methods.append(MethodId(r.u2(), r.u2(), r.u4()))
        self.charge(_b.POOL_ITEM_COST * len(methods))

        self.limits = {"string": ns, "type": nt, "proto": len(protos), "field": len(fields), "method": len(methods)}
        class_defs = []
        r = self.at(h["class_defs_off"])
        for _ in range(h["class_defs_size"]):
            class_defs.append(self._class_def(r))
        dex = DexFile(strings, types, protos, fields, methods, class_defs, self.header)
        dex.validate()
        return dex

    def _check_map(self) -> None:
        off = self.h["map_off"]
        if not off:
            return
        r = self.at(off)
        for _ in range(r.u4()):
            typ = r.u2()
            r.u2()
            r.u4()
            r.u4()
            if typ in _UNSUPPORTED_MAP_TYPES:
                raise DexFormatError(f"{_UNSUPPORTED_MAP_TYPES[typ]} section is not supported")

    def _type_list(self, off: int) -> tuple[int, ...]:
        if not off:
            return ()
        r = self.at(off)
        return tuple(r.u2() for _ in range(r.u4()))

    def _class_def(self, r: Reader) -> ClassDef:
        self.charge(_b.CLASS_DEF_COST)
        type_idx, flags, sup, ifaces_off, src, ann_off, data_off, static_off = (r.u4() for _ in range(8))
        cd = ClassDef(type_idx, flags, sup, self._type_list(ifaces_off), src)
        if data_off:
            cr = self.at(data_off)
            sizes = [cr.uleb128() for _ in range(4)]
            cd.static_fields = self._fields(cr, sizes[0])
            cd.instance_fields = self._fields(cr, sizes[1])
            cd.direct_methods = self._methods(cr, sizes[2])
            cd.virtual_methods = self._methods(cr, sizes[3])
        if ann_off:
            cd.annotations = self._annotations_directory(ann_off)
        if static_off:
            cd.static_values = read_array(self.at(static_off))
        return cd

    def _fields(self, r: Reader, count: int) -> list[EncodedField]:
        out = []
        idx = 0
        for _ in range(count):
            idx += r.uleb128()
            out.append(EncodedField(idx, r.uleb128()))
        self.charge(_b.MEMBER_COST * count)
        return out

    def _methods(self, r: Reader, count: int) -> list[EncodedMethod]:
        out = []
        idx = 0
        for _ in range(count):
            idx += r.uleb128()
            flags = r.uleb128()
            code_off = r.uleb128()
            out.append(EncodedMethod(idx, flags, self._code(code_off) if code_off else None))
        self.charge(_b.MEMBER_COST * count)
        return out

    def _code(self, off: int) -> CodeItem:
        r = self.at(off)
        regs, ins, outs, tries_size = r.u2(), r.u2(), r.u2(), r.u2()
        debug_off = r.u4()
        insns_size = r.u4()
        raw = r.raw(insns_size * 2)
        units = array("H", raw)
        if sys.byteorder == "big":
            units.byteswap()
        insns = decode_all(units)
        self.charge(_b.CODE_ITEM_COST + _b.INSTRUCTION_COST * len(insns))
        tries = []
        if tries_size:
            if insns_size % 2:
                r.u2()
            raw_tries = [(r.u4(), r.u2(), r.u2()) for _ in range(tries_size)]
            list_off = r.pos
            for start, count, handler_off in raw_tries:
                hr = self.at(list_off + handler_off)
                size = hr.sleb128()
                handlers = []
                for _ in range(abs(size)):
                    t = hr.uleb128()
                    _range((t,), self.limits["type"], "handler type")
                    handlers.append(Handler(t, hr.uleb128()))
                if size <= 0:
                    handlers.append(Handler(CATCH_ALL, hr.uleb128()))
                tries.append(TryItem(start, count, tuple(handlers)))
                self.charge(_b.TRY_ITEM_COST + _b.HANDLER_COST * len(handlers))
        for insn in insns:
            kind = insn.ref
            if kind is not None and not 0 <= insn.index < self.limits[kind]:
                raise MalformedIndex(f"{insn.op} references {kind} {insn.index}, pool has {self.limits[kind]}")
        if ins > regs:
            raise MalformedCode(f"ins_size {ins} exceeds registers_size {regs}")
        debug = read_debug_info(self.at(debug_off)) if debug_off else None
        return CodeItem(regs, ins, outs, insns, tries, debug)

    def _annotation_set(self, off: int):
        if not off:
            return None
        r = self.at(off)
        out = []
        for _ in range(r.u4()):
            ar = self.at(r.u4())
            vis = ar.u1()
            out.append(Annotation(vis, read_annotation(ar)))
        return tuple(out)

    def _annotations_directory(self, off: int) -> AnnotationsDirectory:
        r = self.at(off)
        class_off, nf, nm, np_ = r.u4(), r.u4(), r.u4(), r.u4()
        fields = tuple((r.u4(), self._annotation_set(r.u4())) for _ in range(nf))
        methods = tuple((r.u4(), self._annotation_set(r.u4())) for _ in range(nm))
        params = []
        for _ in range(np_):
            midx, ref_off = r.u4(), r.u4()
            rr = self.at(ref_off)
            params.append((midx, tuple(self._annotation_set(rr.u4()) for _ in range(rr.u4()))))
        return AnnotationsDirectory(self._annotation_set(class_off), fields, methods, tuple(params))


def _range(values, limit, what):
    for v in values:
        if v != NO_INDEX and not 0 <= v < limit:
            raise MalformedIndex(f"{what} index {v} out of range (pool size {limit})")
