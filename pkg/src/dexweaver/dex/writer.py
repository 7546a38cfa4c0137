"""DEX container serializer.

Layout is fixed so identical models produce identical bytes: header, the
five id sections, class defs, then the data section in the order

    string_data, type_list, debug_info, code_item, annotation_item,
    annotation_set_item, annotation_set_ref_list, annotations_directory,
    encoded_array, class_data, map_list

Every item is laid out after the items it references, so one pass suffices.
"""

from __future__ import annotations

import hashlib
import struct
import zlib

from ..errors import LayoutOverflow
from .encoding import mutf8_encode, sleb128, uleb128
from .model import CATCH_ALL, CodeItem, DexFile
from .opcodes import check_registers, encode
from .reader import ENDIAN_CONSTANT, HEADER_SIZE
from .values import NO_INDEX, write_annotation, write_array, write_debug_info

TYPE_HEADER_ITEM = 0x0000
TYPE_STRING_ID_ITEM = 0x0001
TYPE_TYPE_ID_ITEM = 0x0002
TYPE_PROTO_ID_ITEM = 0x0003
TYPE_FIELD_ID_ITEM = 0x0004
TYPE_METHOD_ID_ITEM = 0x0005
TYPE_CLASS_DEF_ITEM = 0x0006
TYPE_MAP_LIST = 0x1000
TYPE_TYPE_LIST = 0x1001
TYPE_ANNOTATION_SET_REF_LIST = 0x1002
TYPE_ANNOTATION_SET_ITEM = 0x1003
TYPE_CLASS_DATA_ITEM = 0x2000
TYPE_CODE_ITEM = 0x2001
TYPE_STRING_DATA_ITEM = 0x2002
TYPE_DEBUG_INFO_ITEM = 0x2003
TYPE_ANNOTATION_ITEM = 0x2004
TYPE_ENCODED_ARRAY_ITEM = 0x2005
TYPE_ANNOTATIONS_DIRECTORY_ITEM = 0x2006

U2_MAX = 0xFFFF


def write_dex(dex: DexFile) -> bytes:
    """Serialize ``dex``; header size, checksum and signature are recomputed."""
    return _Writer(dex).run()


def encode_code_units(code: CodeItem) -> list[int]:
    units: list[int] = []
    for insn in code.instructions:
        check_registers(insn)
        units.extend(encode(insn, len(units)))
    return units


class _Writer:
    def __init__(self, dex: DexFile):
        self.dex = dex
        self.buf = bytearray()
        self.sections: list[tuple[int, int, int]] = []  # (type, count, offset)

    # helpers

    def align(self, n: int = 4) -> None:
        while len(self.buf) % n:
            self.buf.append(0)

    def section(self, typ: int, items, emit, alignment: int = 1) -> list[int]:
        offsets = []
        if alignment > 1:
            self.align(alignment)
        start = len(self.buf)
        for item in items:
            if alignment > 1:
                self.align(alignment)
            offsets.append(len(self.buf))
            self.buf += emit(item)
        if offsets:
            self.sections.append((typ, len(offsets), start))
        return offsets

    def run(self) -> bytes:
        dex = self.dex
        for what, pool in (("type", dex.types), ("proto", dex.protos), ("field", dex.fields),
                           ("method", dex.methods)):
            if len(pool) > U2_MAX + 1:
                raise LayoutOverflow(f"{len(pool)} {what} ids exceed the 16-bit index space")
        n_ids = (len(dex.strings) + len(dex.types) + 3 * len(dex.protos) + 2 * len(dex.fields)
                 + 2 * len(dex.methods) + 8 * len(dex.class_defs))
        data_off = HEADER_SIZE + 4 * n_ids
        self.buf = bytearray(data_off)

        string_offs = self.section(TYPE_STRING_DATA_ITEM, dex.strings, _string_data)

        # type lists, deduplicated in first-use order
        lists: dict[tuple, int] = {}
        for p in dex.protos:
            if p.params:
                lists.setdefault(p.params, len(lists))
        for cd in dex.class_defs:
            if cd.interfaces:
                lists.setdefault(cd.interfaces, len(lists))
        list_offs = self.section(TYPE_TYPE_LIST, list(lists), _type_list, 4)
        list_off = {tl: list_offs[i] for tl, i in lists.items()}

        methods = [em for cd in dex.class_defs for em in cd.methods if em.code is not None]
        debug_items = [em.code.debug_info for em in methods if em.code.debug_info is not None]
        debug_offs = iter(self.section(TYPE_DEBUG_INFO_ITEM, debug_items, write_debug_info))
        debug_off = {id(em): next(debug_offs) for em in methods if em.code.debug_info is not None}
        code_offs = self.section(TYPE_CODE_ITEM, methods, lambda em: _code_item(em.code, debug_off.get(id(em), 0)), 4)
        code_off = {id(em): off for em, off in zip(methods, code_offs)}

        ann_off = self._annotations()

        static_items = [cd for cd in dex.class_defs if cd.static_values is not None]
        static_offs = self.section(TYPE_ENCODED_ARRAY_ITEM, static_items, lambda cd: write_array(cd.static_values))
        static_off = {id(cd): off for cd, off in zip(static_items, static_offs)}

        data_items = [cd for cd in dex.class_defs
                      if cd.static_fields or cd.instance_fields or cd.direct_methods or cd.virtual_methods]
        class_data_offs = self.section(TYPE_CLASS_DATA_ITEM, data_items, lambda cd: _class_data(cd, code_off))
        class_data_off = {id(cd): off for cd, off in zip(data_items, class_data_offs)}

        # id sections
        hdr = {}
        pos = HEADER_SIZE
        id_sections = []

        def ids(typ, name, items, fmt, pack):
            nonlocal pos
            hdr[name + "_size"] = len(items)
            hdr[name + "_off"] = pos if items else 0
            if items:
                id_sections.append((typ, len(items), pos))
            for it in items:
                raw = struct.pack(fmt, *pack(it))
                self.buf[pos:pos + len(raw)] = raw
                pos += len(raw)

        ids(TYPE_STRING_ID_ITEM, "string_ids", string_offs, "<I", lambda o: (o,))
        ids(TYPE_TYPE_ID_ITEM, "type_ids", dex.types, "<I", lambda t: (t,))
        ids(TYPE_PROTO_ID_ITEM, "proto_ids", dex.protos, "<III",
            lambda p: (p.shorty_idx, p.return_type_idx, list_off[p.params] if p.params else 0))
        ids(TYPE_FIELD_ID_ITEM, "field_ids", dex.fields, "<HHI", lambda f: (f.class_idx, f.type_idx, f.name_idx))
        ids(TYPE_METHOD_ID_ITEM, "method_ids", dex.methods, "<HHI", lambda m: (m.class_idx, m.proto_idx, m.name_idx))
        ids(TYPE_CLASS_DEF_ITEM, "class_defs", dex.class_defs, "<8I", lambda cd: (
            cd.type_idx, cd.access_flags, cd.superclass_idx,
            list_off[cd.interfaces] if cd.interfaces else 0,
            cd.source_file_idx, ann_off.get(id(cd), 0), class_data_off.get(id(cd), 0),
            static_off.get(id(cd), 0)))

        # map list
        self.align(4)
        map_off = len(self.buf)
        entries = [(TYPE_HEADER_ITEM, 1, 0)] + id_sections + self.sections + [(TYPE_MAP_LIST, 1, map_off)]
        entries.sort(key=lambda e: e[2])
        self.buf += struct.pack("<I", len(entries))
        for typ, count, off in entries:
            self.buf += struct.pack("<HHII", typ, 0, count, off)

        file_size = len(self.buf)
        hdr_fields = [
            0, 0, map_off,
            hdr["string_ids_size"], hdr["string_ids_off"],
            hdr["type_ids_size"], hdr["type_ids_off"],
            hdr["proto_ids_size"], hdr["proto_ids_off"],
            hdr["field_ids_size"], hdr["field_ids_off"],
            hdr["method_ids_size"], hdr["method_ids_off"],
            hdr["class_defs_size"], hdr["class_defs_off"],
            file_size - data_off, data_off,
        ]
        self.buf[0:8] = dex.header.magic
        struct.pack_into("<III", self.buf, 32, file_size, HEADER_SIZE, ENDIAN_CONSTANT)
        struct.pack_into("<17I", self.buf, 44, *hdr_fields)
        self.buf[12:32] = hashlib.sha1(self.buf[32:]).digest()
        struct.pack_into("<I", self.buf, 8, zlib.adler32(self.buf[12:]))
        return bytes(self.buf)

    def _annotations(self) -> dict[int, int]:
        dex = self.dex
        dirs = [cd for cd in dex.class_defs if cd.annotations is not None]
        if not dirs:
            return {}
        sets = []  # every annotation set in directory order
        ref_lists = []
        for cd in dirs:
            d = cd.annotations
            if d.class_annotations is not None:
                sets.append(d.class_annotations)
            sets.extend(s for _, s in d.fields)
            sets.extend(s for _, s in d.methods)
            for _, plist in d.parameters:
                sets.extend(s for s in plist if s is not None)
                ref_lists.append(plist)
        items = [a for s in sets for a in s]
        item_offs = iter(self.section(TYPE_ANNOTATION_ITEM, items,
                                      lambda a: bytes([a.visibility]) + write_annotation(a.annotation)))
        set_bodies = []
        for s in sets:
            set_bodies.append([next(item_offs) for _ in s])
        set_offs = self.section(TYPE_ANNOTATION_SET_ITEM, set_bodies,
                                lambda offs: struct.pack(f"<I{len(offs)}I", len(offs), *offs), 4)
        set_iter = iter(set_offs)

        def take(s):
            return 0 if s is None else next(set_iter)

        layout = []
        for cd in dirs:
            d = cd.annotations
            class_off = take(d.class_annotations)
            fields = [(i, take(s)) for i, s in d.fields]
            methods = [(i, take(s)) for i, s in d.methods]
            params = [(i, [take(s) for s in plist]) for i, plist in d.parameters]
            layout.append((class_off, fields, methods, params))
        ref_offs = iter(self.section(
            TYPE_ANNOTATION_SET_REF_LIST, [p for _, _, _, ps in layout for _, p in ps],
            lambda offs: struct.pack(f"<I{len(offs)}I", len(offs), *offs), 4))

        def directory(entry):
            class_off, fields, methods, params = entry
            out = bytearray(struct.pack("<4I", class_off, len(fields), len(methods), len(params)))
            for i, off in fields + methods:
                out += struct.pack("<II", i, off)
            for i, _ in params:
                out += struct.pack("<II", i, next(ref_offs))
            return bytes(out)

        dir_offs = self.section(TYPE_ANNOTATIONS_DIRECTORY_ITEM, layout, directory, 4)
        return {id(cd): off for cd, off in zip(dirs, dir_offs)}


def _string_data(text: str) -> bytes:
    raw, n = mutf8_encode(text)
    return uleb128(n) + raw + b"\0"


def _type_list(types: tuple[int, ...]) -> bytes:
    return struct.pack(f"<I{len(types)}H", len(types), *types)


def _code_item(code: CodeItem, debug_off: int) -> bytes:
    units = encode_code_units(code)
    for v, what in ((code.registers_size, "registers_size"), (code.ins_size, "ins_size"),
                    (code.outs_size, "outs_size"), (len(code.tries), "tries_size")):
        if v > U2_MAX:
            raise LayoutOverflow(f"{what} {v} does not fit 16 bits")
    out = bytearray(struct.pack("<4HII", code.registers_size, code.ins_size, code.outs_size,
                                len(code.tries), debug_off, len(units)))
    out += struct.pack(f"<{len(units)}H", *units)
    if code.tries:
        if len(units) % 2:
            out += b"\0\0"
        handler_lists: dict[tuple, int] = {}
        encoded = bytearray()
        for t in code.tries:
            if t.handlers not in handler_lists:
                handler_lists[t.handlers] = len(encoded)
                encoded += _handler_list(t.handlers)
        header = uleb128(len(handler_lists))
        for t in code.tries:
            if t.insn_count > U2_MAX:
                raise LayoutOverflow(f"try range of {t.insn_count} code units does not fit 16 bits")
            off = len(header) + handler_lists[t.handlers]
            if off > U2_MAX:
                raise LayoutOverflow("catch handler list too large")
            out += struct.pack("<IHH", t.start_addr, t.insn_count, off)
        out += header + encoded
    return bytes(out)


def _handler_list(handlers) -> bytes:
    typed = [h for h in handlers if h.type_idx != CATCH_ALL]
    catch_all = [h for h in handlers if h.type_idx == CATCH_ALL]
    out = bytearray(sleb128(-len(typed) if catch_all else len(typed)))
    for h in typed:
        out += uleb128(h.type_idx) + uleb128(h.addr)
    if catch_all:
        out += uleb128(catch_all[0].addr)
    return bytes(out)


def _class_data(cd, code_off: dict[int, int]) -> bytes:
    out = bytearray()
    for n in (len(cd.static_fields), len(cd.instance_fields), len(cd.direct_methods), len(cd.virtual_methods)):
        out += uleb128(n)
    for group in (cd.static_fields, cd.instance_fields):
        prev = 0
        for f in group:
            out += uleb128(f.field_idx - prev) + uleb128(f.access_flags)
            prev = f.field_idx
    for group in (cd.direct_methods, cd.virtual_methods):
        prev = 0
        for m in group:
            out += uleb128(m.method_idx - prev) + uleb128(m.access_flags) + uleb128(code_off.get(id(m), 0))
            prev = m.method_idx
    return bytes(out)


__all__ = ["write_dex", "NO_INDEX"]
