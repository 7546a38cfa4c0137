"""In-memory model of a DEX container.

Pools hold indices exactly as the file does.  Growing a pool goes through
:meth:`DexFile.extended`, which re-sorts every pool and remaps every index
stored anywhere in the model, so the ordering invariants of the format hold
after any pass.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

from ..errors import DexFormatError, MalformedCode, MalformedIndex
from .encoding import utf16_sort_key
from .opcodes import Instruction
from .values import NO_INDEX, AnnotationsDirectory, DebugInfo, EncodedValue, Remap

DEFAULT_VERSION = "035"
CATCH_ALL = -1

ACC_PUBLIC = 0x1
ACC_PRIVATE = 0x2
ACC_PROTECTED = 0x4
ACC_STATIC = 0x8
ACC_FINAL = 0x10
ACC_SYNCHRONIZED = 0x20
ACC_VOLATILE = 0x40
ACC_BRIDGE = 0x40
ACC_TRANSIENT = 0x80
ACC_VARARGS = 0x80
ACC_NATIVE = 0x100
ACC_INTERFACE = 0x200
ACC_ABSTRACT = 0x400
ACC_STRICT = 0x800
ACC_SYNTHETIC = 0x1000
ACC_ANNOTATION = 0x2000
ACC_ENUM = 0x4000
ACC_CONSTRUCTOR = 0x10000
ACC_DECLARED_SYNCHRONIZED = 0x20000


@dataclass
class DexHeader:
    version: str = DEFAULT_VERSION
    checksum: int = 0
    signature: bytes = b"\0" * 20
    file_size: int = 0
    offsets: dict = field(default_factory=dict)

    @property
    def magic(self) -> bytes:
        return b"dex\n" + self.version.encode("ascii") + b"\0"


class ProtoId(NamedTuple):
    shorty_idx: int
    return_type_idx: int
    params: tuple[int, ...]


class FieldId(NamedTuple):
    class_idx: int
    type_idx: int
    name_idx: int


class MethodId(NamedTuple):
    class_idx: int
    proto_idx: int
    name_idx: int


class Handler(NamedTuple):
    type_idx: int  # CATCH_ALL for a catch-all handler
    addr: int


@dataclass(frozen=True)
class TryItem:
    start_addr: int
    insn_count: int
    handlers: tuple[Handler, ...]

    @property
    def end_addr(self) -> int:
        return self.start_addr + self.insn_count

    def covers(self, addr: int) -> bool:
        return self.start_addr <= addr < self.end_addr


@dataclass
class CodeItem:
    registers_size: int
    ins_size: int
    outs_size: int
    instructions: list[Instruction]
    tries: list[TryItem] = field(default_factory=list)
    debug_info: DebugInfo | None = None

    def addresses(self) -> list[int]:
        """Start address of every instruction, followed by the end address."""
        out = [0]
        for insn in self.instructions:
            out.append(out[-1] + insn.size)
        return out

    @property
    def insns_size(self) -> int:
        return sum(i.size for i in self.instructions)

    @property
    def first_param_register(self) -> int:
        return self.registers_size - self.ins_size


@dataclass
class EncodedField:
    field_idx: int
    access_flags: int


@dataclass
class EncodedMethod:
    method_idx: int
    access_flags: int
    code: CodeItem | None = None


@dataclass
class ClassDef:
    type_idx: int
    access_flags: int = ACC_PUBLIC
    superclass_idx: int = NO_INDEX
    interfaces: tuple[int, ...] = ()
    source_file_idx: int = NO_INDEX
    static_fields: list[EncodedField] = field(default_factory=list)
    instance_fields: list[EncodedField] = field(default_factory=list)
    direct_methods: list[EncodedMethod] = field(default_factory=list)
    virtual_methods: list[EncodedMethod] = field(default_factory=list)
    annotations: AnnotationsDirectory | None = None
    static_values: tuple[EncodedValue, ...] | None = None

    @property
    def methods(self) -> list[EncodedMethod]:
        return self.direct_methods + self.virtual_methods


# -- descriptors ------------------------------------------------------------

_SIG_RE = re.compile(r"^(\[*L[^;]+;|\[+[ZBSCIJFD])->([^(]+)\((.*)\)(.+)$")


def package_of(descriptor: str) -> str:
    """Dotted package of a class descriptor: ``Lcom/ads/x/Foo;`` -> ``com.ads.x``."""
    name = descriptor[1:-1] if descriptor.startswith("L") and descriptor.endswith(";") else descriptor
    return name.rpartition("/")[0].replace("/", ".")


def split_descriptors(text: str) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(text):
        j = i
        while j < len(text) and text[j] == "[":
            j += 1
        if j >= len(text):
            raise ValueError(f"bad descriptor list {text!r}")
        if text[j] == "L":
            k = text.find(";", j)
            if k < 0:
                raise ValueError(f"unterminated descriptor in {text!r}")
            j = k
        elif text[j] not in "ZBSCIJFDV":
            raise ValueError(f"bad descriptor character {text[j]!r} in {text!r}")
        out.append(text[i:j + 1])
        i = j + 1
    return tuple(out)


def parse_signature(sig: str) -> tuple[str, str, tuple[str, ...], str]:
    """``Lapi/Gps;->getLocation(I)I`` -> (class, name, params, return)."""
    m = _SIG_RE.match(sig)
    if not m:
        raise ValueError(f"not a method signature: {sig!r}")
    cls, name, params, ret = m.groups()
    rets = split_descriptors(ret)
    if len(rets) != 1:
        raise ValueError(f"bad return type in {sig!r}")
    return cls, name, split_descriptors(params), ret


def format_signature(cls: str, name: str, params, ret: str) -> str:
    return f"{cls}->{name}({''.join(params)}){ret}"


def shorty(ret: str, params) -> str:
    def one(d):
        return "L" if d[0] in "L[" else d
    return one(ret) + "".join(one(p) for p in params)


def register_words(params) -> int:
    return sum(2 if p in ("J", "D") else 1 for p in params)


# -- the container ----------------------------------------------------------

@dataclass
class DexFile:
    strings: list[str] = field(default_factory=list)
    types: list[int] = field(default_factory=list)
    protos: list[ProtoId] = field(default_factory=list)
    fields: list[FieldId] = field(default_factory=list)
    methods: list[MethodId] = field(default_factory=list)
    class_defs: list[ClassDef] = field(default_factory=list)
    header: DexHeader = field(default_factory=DexHeader, compare=False)

    # symbolic views

    def type_desc(self, idx: int) -> str:
        return self.strings[self.types[idx]]

    def proto_descs(self, idx: int) -> tuple[str, tuple[str, ...]]:
        p = self.protos[idx]
        return self.type_desc(p.return_type_idx), tuple(self.type_desc(t) for t in p.params)

    def method_parts(self, idx: int) -> tuple[str, str, tuple[str, ...], str]:
        m = self.methods[idx]
        ret, params = self.proto_descs(m.proto_idx)
        return self.type_desc(m.class_idx), self.strings[m.name_idx], params, ret

    def method_signature(self, idx: int) -> str:
        return format_signature(*self.method_parts(idx))

    def field_parts(self, idx: int) -> tuple[str, str, str]:
        f = self.fields[idx]
        return self.type_desc(f.class_idx), self.strings[f.name_idx], self.type_desc(f.type_idx)

    def class_descriptor(self, cd: ClassDef) -> str:
        return self.type_desc(cd.type_idx)

    def package_name(self, cd: ClassDef) -> str:
        return package_of(self.class_descriptor(cd))

    def ref_text(self, kind: str, idx: int) -> str:
        if kind == "string":
            return self.strings[idx]
        if kind == "type":
            return self.type_desc(idx)
        if kind == "method":
            return self.method_signature(idx)
        if kind == "field":
            cls, name, typ = self.field_parts(idx)
            return f"{cls}->{name}:{typ}"
        raise KeyError(kind)

    # lookups

    def string_index(self, text: str) -> int | None:
        return _bsearch(self.strings, utf16_sort_key(text), utf16_sort_key)

    def type_index(self, desc: str) -> int | None:
        s = self.string_index(desc)
        if s is None:
            return None
        return _bsearch(self.types, s, lambda x: x)

    def method_index(self, sig: str) -> int | None:
        return self.method_table().get(sig)

    def method_table(self) -> dict[str, int]:
        return {self.method_signature(i): i for i in range(len(self.methods))}

    def find_class(self, desc: str) -> ClassDef | None:
        t = self.type_index(desc)
        if t is None:
            return None
        for cd in self.class_defs:
            if cd.type_idx == t:
                return cd
        return None

    def iter_methods(self) -> Iterator[tuple[ClassDef, EncodedMethod]]:
        for cd in self.class_defs:
            for em in cd.methods:
                yield cd, em

    # pool growth

    def extended(self, *, strings=(), types=(), protos=(), fields=(), methods=()) -> DexFile:
        """Return a copy whose pools also contain the given symbolic entries.

        ``protos`` are ``(return, params)`` descriptor pairs, ``fields`` are
        ``(class, name, type)`` and ``methods`` are signature strings or
        ``(class, name, params, return)`` tuples.  Dependent strings, types
        and protos are added automatically.  Returns ``self`` when nothing
        is new.
        """
        S, T, P, F, M = self._symbolic_pools()
        new_s, new_t, new_p, new_f, new_m = set(S), set(T), set(P), set(F), set(M)
        for sig in methods:
            cls, name, params, ret = parse_signature(sig) if isinstance(sig, str) else sig
            new_m.add((cls, name, (ret, tuple(params))))
        new_f.update(tuple(f) for f in fields)
        new_p.update((ret, tuple(params)) for ret, params in protos)
        new_t.update(types)
        new_s.update(strings)
        _close(new_s, new_t, new_p, new_f, new_m)
        if (len(new_s), len(new_t), len(new_p), len(new_f), len(new_m)) == (
                len(S), len(T), len(P), len(F), len(M)):
            return self
        return self._rebuilt(new_s, new_t, new_p, new_f, new_m)

    def compacted(self) -> DexFile:
        """Return a copy without pool entries that nothing references."""
        S, T, P, F, M = self._symbolic_pools()
        used = {"string": set(), "type": set(), "proto": set(), "field": set(), "method": set()}

        def mark(kind, idx):
            if idx != NO_INDEX and idx != CATCH_ALL:
                used[kind].add(idx)
            return idx

        marker = _MarkingRemap(mark)
        for cd in self.class_defs:
            remap_class(cd, marker)
        keep_s = {S[i] for i in used["string"]}
        keep_t = {T[i] for i in used["type"]}
        keep_p = {P[i] for i in used["proto"]}
        keep_f = {F[i] for i in used["field"]}
        keep_m = {M[i] for i in used["method"]}
        _close(keep_s, keep_t, keep_p, keep_f, keep_m)
        if (len(keep_s), len(keep_t), len(keep_p), len(keep_f), len(keep_m)) == (
                len(S), len(T), len(P), len(F), len(M)):
            return self
        return self._rebuilt(keep_s, keep_t, keep_p, keep_f, keep_m)

    def _symbolic_pools(self):
        S = self.strings
        T = [S[i] for i in self.types]
        P = [(T[p.return_type_idx], tuple(T[t] for t in p.params)) for p in self.protos]
        F = [(T[f.class_idx], S[f.name_idx], T[f.type_idx]) for f in self.fields]
        M = [(T[m.class_idx], S[m.name_idx], P[m.proto_idx]) for m in self.methods]
        return S, T, P, F, M

    def _rebuilt(self, new_s, new_t, new_p, new_f, new_m) -> DexFile:
        S, T, P, F, M = self._symbolic_pools()
        strings_sorted = sorted(new_s, key=utf16_sort_key)
        s_index = {s: i for i, s in enumerate(strings_sorted)}
        types_sorted = sorted(new_t, key=lambda d: s_index[d])
        t_index = {d: i for i, d in enumerate(types_sorted)}

        def proto_key(p):
            return t_index[p[0]], tuple(t_index[x] for x in p[1])

        protos_sorted = sorted(new_p, key=proto_key)
        p_index = {p: i for i, p in enumerate(protos_sorted)}
        fields_sorted = sorted(new_f, key=lambda f: (t_index[f[0]], s_index[f[1]], t_index[f[2]]))
        f_index = {f: i for i, f in enumerate(fields_sorted)}
        methods_sorted = sorted(new_m, key=lambda m: (t_index[m[0]], s_index[m[1]], p_index[m[2]]))
        m_index = {m: i for i, m in enumerate(methods_sorted)}

        remap = Remap(
            string=[s_index.get(s, -1) for s in S],
            type=[t_index.get(t, -1) for t in T],
            proto=[p_index.get(p, -1) for p in P],
            field=[f_index.get(f, -1) for f in F],
            method=[m_index.get(m, -1) for m in M],
        )
        return DexFile(
            strings=strings_sorted,
            types=[s_index[d] for d in types_sorted],
            protos=[ProtoId(s_index[shorty(r, ps)], t_index[r], tuple(t_index[x] for x in ps))
                    for r, ps in protos_sorted],
            fields=[FieldId(t_index[c], t_index[t], s_index[n]) for c, n, t in fields_sorted],
            methods=[MethodId(t_index[c], p_index[p], s_index[n]) for c, n, p in methods_sorted],
            class_defs=[remap_class(cd, remap) for cd in self.class_defs],
            header=replace(self.header, offsets={}),
        )

    # invariants

    def validate(self) -> None:
        """Check pool ordering, index ranges and code-item invariants."""
        ns, nt, np_, nf, nm = (len(self.strings), len(self.types), len(self.protos),
                               len(self.fields), len(self.methods))
        keys = [utf16_sort_key(s) for s in self.strings]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise DexFormatError("string pool is not strictly sorted")
        _check_range(self.types, ns, "type descriptor string")
        if any(a >= b for a, b in zip(self.types, self.types[1:])):
            raise DexFormatError("type pool is not strictly sorted")
        pkeys = []
        for p in self.protos:
            _check_range((p.shorty_idx,), ns, "proto shorty")
            _check_range((p.return_type_idx,) + p.params, nt, "proto type")
            pkeys.append((p.return_type_idx, p.params))
        if any(a >= b for a, b in zip(pkeys, pkeys[1:])):
            raise DexFormatError("proto pool is not strictly sorted")
        fkeys = []
        for f in self.fields:
            _check_range((f.class_idx, f.type_idx), nt, "field type")
            _check_range((f.name_idx,), ns, "field name")
            fkeys.append((f.class_idx, f.name_idx, f.type_idx))
        if any(a >= b for a, b in zip(fkeys, fkeys[1:])):
            raise DexFormatError("field pool is not strictly sorted")
        mkeys = []
        for m in self.methods:
            _check_range((m.class_idx,), nt, "method class")
            _check_range((m.proto_idx,), np_, "method proto")
            _check_range((m.name_idx,), ns, "method name")
            mkeys.append((m.class_idx, m.name_idx, m.proto_idx))
        if any(a >= b for a, b in zip(mkeys, mkeys[1:])):
            raise DexFormatError("method pool is not strictly sorted")

        limits = {"string": ns, "type": nt, "field": nf, "method": nm, "proto": np_}
        seen = {}
        for pos, cd in enumerate(self.class_defs):
            _check_range((cd.type_idx,), nt, "class type")
            if cd.type_idx in seen:
                raise DexFormatError(f"class {self.type_desc(cd.type_idx)} defined twice")
            seen[cd.type_idx] = pos
            for t in (cd.superclass_idx, *cd.interfaces):
                if t != NO_INDEX:
                    _check_range((t,), nt, "class super/interface")
            if cd.source_file_idx != NO_INDEX:
                _check_range((cd.source_file_idx,), ns, "source file")
            for group in (cd.static_fields, cd.instance_fields):
                idxs = [f.field_idx for f in group]
                _check_range(idxs, nf, "encoded field")
                if any(a >= b for a, b in zip(idxs, idxs[1:])):
                    raise DexFormatError("encoded fields are not sorted")
            for group in (cd.direct_methods, cd.virtual_methods):
                idxs = [m.method_idx for m in group]
                _check_range(idxs, nm, "encoded method")
                if any(a >= b for a, b in zip(idxs, idxs[1:])):
                    raise DexFormatError("encoded methods are not sorted")
                for em in group:
                    if em.code is not None:
                        _validate_code(em.code, limits, self.method_signature(em.method_idx))
        for pos, cd in enumerate(self.class_defs):
            for t in (cd.superclass_idx, *cd.interfaces):
                if seen.get(t, -1) > pos:
                    raise DexFormatError(
                        f"{self.type_desc(cd.type_idx)} precedes its supertype {self.type_desc(t)}")


def _bsearch(seq, key, keyfn):
    lo, hi = 0, len(seq)
    while lo < hi:
        mid = (lo + hi) // 2
        k = keyfn(seq[mid])
        if k < key:
            lo = mid + 1
        elif k > key:
            hi = mid
        else:
            return mid
    return None


def _check_range(values, limit, what):
    for v in values:
        if not 0 <= v < limit:
            raise MalformedIndex(f"{what} index {v} out of range (pool size {limit})")


def _validate_code(code: CodeItem, limits: dict, where: str) -> None:
    if code.ins_size > code.registers_size:
        raise MalformedCode(f"{where}: ins_size {code.ins_size} > registers_size {code.registers_size}")
    addrs = code.addresses()
    boundaries = set(addrs[:-1])
    end = addrs[-1]
    for insn in code.instructions:
        kind = insn.ref
        if kind is not None:
            _check_range((insn.index,), limits[kind], f"{where}: {insn.op}")
        if insn.target is not None and insn.target not in boundaries:
            raise MalformedCode(f"{where}: {insn.op} targets {insn.target}, not an instruction boundary")
        for r in insn.regs:
            if r >= code.registers_size:
                raise MalformedCode(f"{where}: {insn.op} uses v{r} beyond registers_size {code.registers_size}")
    prev_end = 0
    for t in code.tries:
        if t.insn_count <= 0 or t.start_addr not in boundaries or (
                t.end_addr not in boundaries and t.end_addr != end):
            raise MalformedCode(f"{where}: try range [{t.start_addr}, {t.end_addr}) misses instruction boundaries")
        if t.start_addr < prev_end:
            raise MalformedCode(f"{where}: try ranges overlap or are unsorted")
        prev_end = t.end_addr
        if not t.handlers:
            raise MalformedCode(f"{where}: try item without handlers")
        for i, h in enumerate(t.handlers):
            if h.type_idx == CATCH_ALL:
                if i != len(t.handlers) - 1:
                    raise MalformedCode(f"{where}: catch-all handler must be listed last")
            else:
                _check_range((h.type_idx,), limits["type"], f"{where}: handler type")
            if h.addr not in boundaries:
                raise MalformedCode(f"{where}: handler address {h.addr} is not an instruction boundary")


# -- remapping ----------------------------------------------------------------

def remap_insn(insn: Instruction, remap: Remap) -> Instruction:
    kind = insn.ref
    if kind is None:
        return insn
    new = remap(kind, insn.index)
    return insn if new == insn.index else replace(insn, index=new)


def remap_code(code: CodeItem, remap: Remap) -> CodeItem:
    return CodeItem(
        code.registers_size, code.ins_size, code.outs_size,
        [remap_insn(i, remap) for i in code.instructions],
        [TryItem(t.start_addr, t.insn_count,
                 tuple(Handler(h.type_idx if h.type_idx == CATCH_ALL else remap("type", h.type_idx), h.addr)
                       for h in t.handlers))
         for t in code.tries],
        code.debug_info.remapped(remap) if code.debug_info else None,
    )


def remap_class(cd: ClassDef, remap: Remap) -> ClassDef:
    def methods(group):
        return [EncodedMethod(remap("method", m.method_idx), m.access_flags,
                              remap_code(m.code, remap) if m.code else None) for m in group]

    def fields(group):
        return [EncodedField(remap("field", f.field_idx), f.access_flags) for f in group]

    return ClassDef(
        type_idx=remap("type", cd.type_idx),
        access_flags=cd.access_flags,
        superclass_idx=remap("type", cd.superclass_idx),
        interfaces=tuple(remap("type", t) for t in cd.interfaces),
        source_file_idx=remap("string", cd.source_file_idx),
        static_fields=fields(cd.static_fields),
        instance_fields=fields(cd.instance_fields),
        direct_methods=methods(cd.direct_methods),
        virtual_methods=methods(cd.virtual_methods),
        annotations=cd.annotations.remapped(remap) if cd.annotations else None,
        static_values=tuple(v.remapped(remap) for v in cd.static_values) if cd.static_values is not None else None,
    )


class _MarkingRemap(Remap):
    """Identity remap that reports every index it sees."""

    def __init__(self, mark):
        super().__init__()
        self.mark = mark

    def __call__(self, kind: str, index: int) -> int:
        return self.mark(kind, index)


def _close(S, T, P, F, M) -> None:
    """Add the strings, types and protos that methods, fields and protos depend on."""
    for cls, name, proto in M:
        T.add(cls)
        S.add(name)
        P.add(proto)
    for cls, name, typ in F:
        T.update((cls, typ))
        S.add(name)
    for ret, params in P:
        T.add(ret)
        T.update(params)
        S.add(shorty(ret, params))
    S.update(T)
