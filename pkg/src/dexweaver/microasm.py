"""Textual assembler and disassembler for the supported instruction subset.

The syntax is a small slice of smali::

    .class public Lapp/Main;
    .super Ljava/lang/Object;
    .source "Main.java"

    .field private static count:I

    .method public static main()I
        .registers 2
    :start
        const/4 v0, 1
        invoke-static {v0}, Lapi/Gps;->getLocation(I)I
        move-result v1
    :end
        return v1
    :handler
        const/4 v1, 0
        return v1
        .try :start :end catch Ljava/io/IOException; :handler
    .end method
    .end class

Registers are written ``v0`` .. ``v255``; there are no parameter aliases.
String literals use JSON escapes.  ``.catchall :start :end :handler`` adds a
catch-all handler.  Nested try ranges are split into the disjoint pieces the
format requires, inner handlers first.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .dex.code import SymTry, layout, to_symbolic
from .dex.model import (
    ACC_CONSTRUCTOR, ACC_PRIVATE, ACC_STATIC, CATCH_ALL, ClassDef, DexFile, EncodedField,
    EncodedMethod, Handler, parse_signature, register_words, split_descriptors,
)
from .dex.opcodes import BY_NAME, SUBSET, Instruction, check_registers
from .dex.values import NO_INDEX
from .errors import (
    AsmSyntaxError, DuplicateLabel, LayoutOverflow, MalformedCode, OpaqueRegion,
    RegisterPressure, UndefinedLabel, UnknownOpcode,
)

CLASS_FLAGS = {
    "public": 0x1, "private": 0x2, "protected": 0x4, "static": 0x8, "final": 0x10,
    "interface": 0x200, "abstract": 0x400, "synthetic": 0x1000, "annotation": 0x2000,
    "enum": 0x4000,
}
METHOD_FLAGS = {
    "public": 0x1, "private": 0x2, "protected": 0x4, "static": 0x8, "final": 0x10,
    "synchronized": 0x20, "bridge": 0x40, "varargs": 0x80, "native": 0x100,
    "abstract": 0x400, "strict": 0x800, "synthetic": 0x1000, "constructor": 0x10000,
    "declared-synchronized": 0x20000,
}
FIELD_FLAGS = {
    "public": 0x1, "private": 0x2, "protected": 0x4, "static": 0x8, "final": 0x10,
    "volatile": 0x40, "transient": 0x80, "synthetic": 0x1000, "enum": 0x4000,
}

# operand shapes: r register, i literal, s string, t type, l label, m method, R register list
SHAPES = {
    "nop": "", "return-void": "",
    "const/4": "ri", "const/16": "ri", "const-string": "rs",
    "move": "rr", "move-object": "rr",
    "move-result": "r", "move-result-object": "r",
    "return": "r", "return-object": "r", "throw": "r",
    "new-instance": "rt",
    "invoke-static": "Rm", "invoke-virtual": "Rm", "invoke-direct": "Rm",
    "goto": "l", "goto/16": "l", "goto/32": "l",
    "if-eqz": "rl",
}
assert set(SHAPES) == SUBSET

LITERAL_BITS = {"const/4": 4, "const/16": 16}

_OPERAND_RE = re.compile(r'\s*("(?:[^"\\]|\\.)*"|\{[^}]*\}|[^,]+?)\s*(?:,|$)')
_REG_RE = re.compile(r"v(\d+)$")
_LABEL_RE = re.compile(r":([A-Za-z_][\w$]*)$")
_TYPE_RE = re.compile(r"\[*(?:[ZBSCIJFDV]|L[^;\s]+;)$")
_MEMBER_RE = re.compile(r"([^\s(]+)\(([^)]*)\)(\S+)$")


# -- parsed source ----------------------------------------------------------

@dataclass
class _Method:
    line: int
    flags: int
    name: str
    params: tuple[str, ...]
    ret: str
    registers: int | None = None
    body: list = field(default_factory=list)  # ("insn", op, operands, line) | ("label", name, line)
    tries: list = field(default_factory=list)  # (start, end, type or None, handler, line)


@dataclass
class _Class:
    line: int
    desc: str
    flags: int
    superclass: str | None = None
    interfaces: list[str] = field(default_factory=list)
    source: str | None = None
    fields: list = field(default_factory=list)  # (flags, name, type)
    methods: list[_Method] = field(default_factory=list)


def _strip_comment(text: str) -> str:
    in_str = False
    escaped = False
    for i, ch in enumerate(text):
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "#":
            return text[:i]
    return text


def _flags(words, table, line, col) -> int:
    value = 0
    for w in words:
        if w in table:
            value |= table[w]
        elif re.fullmatch(r"0x[0-9a-fA-F]+", w):
            value |= int(w, 16)
        else:
            raise AsmSyntaxError(f"unknown access flag {w!r}", line, col)
    return value


def _check_type(desc: str, line: int, col: int, *, void=False) -> str:
    if not _TYPE_RE.match(desc) or (desc.endswith("V") and desc != "V") or (desc == "V" and not void):
        raise AsmSyntaxError(f"bad type descriptor {desc!r}", line, col)
    return desc


def _parse_member(text: str, line: int, col: int):
    m = _MEMBER_RE.match(text)
    if not m:
        raise AsmSyntaxError(f"bad method declaration {text!r}", line, col)
    name, params, ret = m.groups()
    try:
        params = split_descriptors(params)
    except ValueError as exc:
        raise AsmSyntaxError(str(exc), line, col) from None
    for p in params:
        _check_type(p, line, col)
    return name, params, _check_type(ret, line, col, void=True)


def _parse(text: str) -> list[_Class]:
    classes: list[_Class] = []
    cls: _Class | None = None
    meth: _Method | None = None
    for number, raw in enumerate(text.splitlines(), 1):
        body = _strip_comment(raw).rstrip()
        stripped = body.strip()
        if not stripped:
            continue
        col = len(body) - len(body.lstrip()) + 1
        if stripped.startswith(":"):
            if meth is None:
                raise AsmSyntaxError("label outside a method", number, col)
            m = _LABEL_RE.match(stripped)
            if not m:
                raise AsmSyntaxError(f"bad label {stripped!r}", number, col)
            meth.body.append(("label", m.group(1), number))
            continue
        word, _, rest = stripped.partition(" ")
        rest = rest.strip()
        if word.startswith("."):
            if word == ".class":
                if meth is not None:
                    raise AsmSyntaxError(".class inside a method", number, col)
                *flags, desc = rest.split() or [""]
                cls = _Class(number, _check_type(desc, number, col), _flags(flags, CLASS_FLAGS, number, col))
                if cls.desc[0] != "L":
                    raise AsmSyntaxError(f"class descriptor must be a reference type: {desc}", number, col)
                classes.append(cls)
            elif cls is None:
                raise AsmSyntaxError(f"{word} outside a class", number, col)
            elif word == ".super":
                cls.superclass = _check_type(rest, number, col)
            elif word == ".implements":
                cls.interfaces.append(_check_type(rest, number, col))
            elif word == ".source":
                cls.source = _string_literal(rest, number, col)
            elif word == ".field":
                *flags, decl = rest.split() or [""]
                name, sep, typ = decl.partition(":")
                if not sep or not name:
                    raise AsmSyntaxError(f"bad field declaration {decl!r}", number, col)
                cls.fields.append((_flags(flags, FIELD_FLAGS, number, col), name,
                                   _check_type(typ, number, col)))
            elif word == ".method":
                if meth is not None:
                    raise AsmSyntaxError("nested .method", number, col)
                *flags, decl = rest.split() or [""]
                name, params, ret = _parse_member(decl, number, col)
                meth = _Method(number, _flags(flags, METHOD_FLAGS, number, col), name, params, ret)
                cls.methods.append(meth)
            elif word == ".registers":
                if meth is None:
                    raise AsmSyntaxError(".registers outside a method", number, col)
                if meth.registers is not None:
                    raise AsmSyntaxError("duplicate .registers", number, col)
                if not rest.isdigit() or int(rest) > 0xFFFF:
                    raise AsmSyntaxError(f"bad register count {rest!r}", number, col)
                meth.registers = int(rest)
            elif word in (".try", ".catchall"):
                if meth is None:
                    raise AsmSyntaxError(f"{word} outside a method", number, col)
                meth.tries.append(_parse_try(word, rest, number, col))
            elif word == ".end":
                if rest == "method":
                    if meth is None:
                        raise AsmSyntaxError(".end method without .method", number, col)
                    meth = None
                elif rest == "class":
                    if meth is not None:
                        raise AsmSyntaxError("missing .end method", number, col)
                    cls = None
                else:
                    raise AsmSyntaxError(f"unknown directive .end {rest}", number, col)
            else:
                raise AsmSyntaxError(f"unknown directive {word}", number, col)
            continue
        if meth is None:
            raise AsmSyntaxError("instruction outside a method", number, col)
        if word not in SHAPES:
            if word in BY_NAME:
                raise UnknownOpcode(f"opcode {word} is outside the supported subset", number, col)
            raise UnknownOpcode(f"unknown opcode {word}", number, col)
        operands = [m.group(1) for m in _OPERAND_RE.finditer(rest)] if rest else []
        operands = [o for o in operands if o != ""]
        meth.body.append(("insn", word, operands, number, col))
    if meth is not None:
        raise AsmSyntaxError("missing .end method", meth.line, 1)
    return classes


def _parse_try(word, rest, line, col):
    parts = rest.split()
    if word == ".catchall":
        if len(parts) != 3:
            raise AsmSyntaxError(".catchall expects :start :end :handler", line, col)
        start, end, handler = parts
        typ = None
    else:
        if len(parts) != 5 or parts[2] != "catch":
            raise AsmSyntaxError(".try expects :start :end catch Ltype; :handler", line, col)
        start, end, _, typ, handler = parts
        _check_type(typ, line, col)
    names = []
    for p in (start, end, handler):
        m = _LABEL_RE.match(p)
        if not m:
            raise AsmSyntaxError(f"bad label {p!r}", line, col)
        names.append(m.group(1))
    return names[0], names[1], typ, names[2], line


def _string_literal(text: str, line: int, col: int) -> str:
    if not (text.startswith('"') and text.endswith('"') and len(text) >= 2):
        raise AsmSyntaxError(f"expected a string literal, got {text!r}", line, col)
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AsmSyntaxError(f"bad string literal: {exc.msg}", line, col) from None
    if not isinstance(value, str):
        raise AsmSyntaxError("expected a string literal", line, col)
    return value


def _register(text: str, line: int, col: int) -> int:
    m = _REG_RE.match(text)
    if not m or int(m.group(1)) > 255:
        raise AsmSyntaxError(f"bad register {text!r} (expected v0..v255)", line, col)
    return int(m.group(1))


def _integer(text: str, line: int, col: int) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise AsmSyntaxError(f"bad integer literal {text!r}", line, col) from None


# -- assembly ---------------------------------------------------------------

def _class_order(classes: list[_Class]) -> list[_Class]:
    """Source order, except that supertypes defined here come first."""
    by_desc = {}
    for c in classes:
        if c.desc in by_desc:
            raise AsmSyntaxError(f"class {c.desc} defined twice", c.line, 1)
        by_desc[c.desc] = c
    out, state = [], {}

    def visit(c: _Class, chain):
        if state.get(c.desc) == "done":
            return
        if state.get(c.desc) == "active":
            raise AsmSyntaxError(f"cyclic inheritance through {c.desc}", c.line, 1)
        state[c.desc] = "active"
        for sup in ([c.superclass] if c.superclass else []) + c.interfaces:
            if sup in by_desc:
                visit(by_desc[sup], chain)
        state[c.desc] = "done"
        out.append(c)

    for c in classes:
        visit(c, ())
    return out


def assemble(text: str) -> DexFile:
    """Assemble source text into a validated :class:`DexFile`."""
    classes = _class_order(_parse(text))

    strings, types, fields, methods = set(), set(), set(), set()
    for c in classes:
        types.add(c.desc)
        if c.superclass:
            types.add(c.superclass)
        types.update(c.interfaces)
        if c.source is not None:
            strings.add(c.source)
        for _, name, typ in c.fields:
            fields.add((c.desc, name, typ))
        for m in c.methods:
            methods.add((c.desc, m.name, m.params, m.ret))
            for item in m.body:
                if item[0] != "insn":
                    continue
                _, op, operands, line, col = item
                shape = SHAPES[op]
                for kind, operand in zip(shape, operands):
                    if kind == "s":
                        strings.add(_string_literal(operand, line, col))
                    elif kind == "t":
                        types.add(_check_type(operand, line, col))
                    elif kind == "m":
                        methods.add(_method_ref(operand, line, col))
            for _, _, typ, _, _ in m.tries:
                if typ is not None:
                    types.add(typ)

    dex = DexFile().extended(strings=strings, types=types, fields=fields, methods=methods)
    method_index = {tuple(_sig_parts(dex, i)): i for i in range(len(dex.methods))}
    field_index = {dex.field_parts(i): i for i in range(len(dex.fields))}

    class_defs = []
    for c in classes:
        cd = ClassDef(
            type_idx=dex.type_index(c.desc),
            access_flags=c.flags,
            superclass_idx=dex.type_index(c.superclass) if c.superclass else NO_INDEX,
            interfaces=tuple(dex.type_index(t) for t in c.interfaces),
            source_file_idx=dex.string_index(c.source) if c.source is not None else NO_INDEX,
        )
        seen_fields = set()
        for flags, name, typ in c.fields:
            if (name, typ) in seen_fields:
                raise AsmSyntaxError(f"field {name}:{typ} declared twice in {c.desc}", c.line, 1)
            seen_fields.add((name, typ))
            group = cd.static_fields if flags & ACC_STATIC else cd.instance_fields
            group.append(EncodedField(field_index[(c.desc, name, typ)], flags))
        seen_methods = set()
        for m in c.methods:
            key = (c.desc, m.name, m.params, m.ret)
            if key in seen_methods:
                raise AsmSyntaxError(f"method {m.name} declared twice in {c.desc}", m.line, 1)
            seen_methods.add(key)
            code = _assemble_code(dex, m, method_index)
            em = EncodedMethod(method_index[key], m.flags, code)
            direct = m.flags & (ACC_STATIC | ACC_PRIVATE | ACC_CONSTRUCTOR) or m.name in ("<init>", "<clinit>")
            (cd.direct_methods if direct else cd.virtual_methods).append(em)
        for group in (cd.static_fields, cd.instance_fields):
            group.sort(key=lambda f: f.field_idx)
        for group in (cd.direct_methods, cd.virtual_methods):
            group.sort(key=lambda e: e.method_idx)
        class_defs.append(cd)
    dex.class_defs = class_defs
    dex.validate()
    return dex


def _sig_parts(dex: DexFile, i: int):
    cls, name, params, ret = dex.method_parts(i)
    return cls, name, params, ret


def _method_ref(text: str, line: int, col: int):
    try:
        cls, name, params, ret = parse_signature(text)
    except ValueError as exc:
        raise AsmSyntaxError(str(exc), line, col) from None
    for p in params:
        _check_type(p, line, col)
    _check_type(ret, line, col, void=True)
    return cls, name, params, ret


def _assemble_code(dex: DexFile, m: _Method, method_index: dict):
    has_body = any(item[0] == "insn" for item in m.body)
    if not has_body:
        if m.registers is not None or m.tries or m.body:
            raise AsmSyntaxError(f"method {m.name} has no instructions", m.line, 1)
        return None
    if m.registers is None:
        raise AsmSyntaxError(f"method {m.name} lacks .registers", m.line, 1)
    ins = register_words(m.params) + (0 if m.flags & ACC_STATIC else 1)
    if ins > m.registers:
        raise AsmSyntaxError(f"method {m.name} needs {ins} parameter registers but declares "
                             f"{m.registers}", m.line, 1)

    labels: dict[str, int] = {}
    count = 0
    for item in m.body:
        if item[0] == "label":
            _, name, line = item
            if name in labels:
                raise DuplicateLabel(f"label :{name} defined twice", line, 1)
            labels[name] = count
        else:
            count += 1

    def resolve(name, line, col):
        if name not in labels:
            raise UndefinedLabel(f"undefined label :{name}", line, col)
        return labels[name]

    insns: list[Instruction] = []
    lines: list[int] = []
    outs = 0
    for item in m.body:
        if item[0] != "insn":
            continue
        _, op, operands, line, col = item
        shape = SHAPES[op]
        if len(operands) != len(shape):
            raise AsmSyntaxError(f"{op} takes {len(shape)} operand(s), got {len(operands)}", line, col)
        regs, literal, index, target = [], None, None, None
        for kind, operand in zip(shape, operands):
            if kind == "r":
                regs.append(_register(operand, line, col))
            elif kind == "R":
                if not (operand.startswith("{") and operand.endswith("}")):
                    raise AsmSyntaxError(f"expected a register list, got {operand!r}", line, col)
                inner = operand[1:-1].strip()
                if inner:
                    regs.extend(_register(r.strip(), line, col) for r in inner.split(","))
            elif kind == "i":
                literal = _integer(operand, line, col)
                bits = LITERAL_BITS[op]
                if not -(1 << (bits - 1)) <= literal < (1 << (bits - 1)):
                    raise AsmSyntaxError(f"{op} literal {literal} does not fit {bits} bits", line, col)
            elif kind == "s":
                index = dex.string_index(_string_literal(operand, line, col))
            elif kind == "t":
                index = dex.type_index(operand)
            elif kind == "m":
                index = method_index[_method_ref(operand, line, col)]
            elif kind == "l":
                m_label = _LABEL_RE.match(operand)
                if not m_label:
                    raise AsmSyntaxError(f"bad label {operand!r}", line, col)
                target = resolve(m_label.group(1), line, col)
                if target >= count:
                    raise AsmSyntaxError(f"{op} targets :{m_label.group(1)} past the last instruction",
                                         line, col)
        insn = Instruction(op, tuple(regs), literal, index, target)
        try:
            check_registers(insn)
        except RegisterPressure as exc:
            raise AsmSyntaxError(str(exc), line, col) from None
        for r in regs:
            if r >= m.registers:
                raise AsmSyntaxError(f"v{r} exceeds .registers {m.registers}", line, col)
        if insn.is_invoke:
            outs = max(outs, len(regs))
        insns.append(insn)
        lines.append(line)

    tries = _build_tries(m, resolve, count, dex)
    try:
        return layout(insns, tries, m.registers, ins, outs)
    except (LayoutOverflow, MalformedCode) as exc:
        raise AsmSyntaxError(f"method {m.name}: {exc}", m.line, 1) from None


def _build_tries(m: _Method, resolve, count: int, dex: DexFile) -> list[SymTry]:
    ranges: dict[tuple[int, int], list] = {}
    for start, end, typ, handler, line in m.tries:
        s, e, h = resolve(start, line, 1), resolve(end, line, 1), resolve(handler, line, 1)
        if not s < e:
            raise AsmSyntaxError(f"empty try range :{start} .. :{end}", line, 1)
        if h >= count:
            raise AsmSyntaxError(f"handler :{handler} is past the last instruction", line, 1)
        entries = ranges.setdefault((s, e), [])
        type_idx = CATCH_ALL if typ is None else dex.type_index(typ)
        if any(t == CATCH_ALL for t, _ in entries):
            raise AsmSyntaxError("a handler follows .catchall for the same range", line, 1)
        if any(t == type_idx for t, _ in entries):
            raise AsmSyntaxError(f"duplicate handler for {typ or 'catch-all'}", line, 1)
        entries.append((type_idx, h))
    if not ranges:
        return []
    spans = list(ranges)
    for a in spans:
        for b in spans:
            if a[0] < b[0] < a[1] < b[1]:
                raise AsmSyntaxError(f"try ranges {a} and {b} overlap without nesting", m.line, 1)
    cuts = sorted({p for span in spans for p in span})
    pieces = []
    for lo, hi in zip(cuts, cuts[1:]):
        covering = sorted((s for s in spans if s[0] <= lo and hi <= s[1]), key=lambda s: s[1] - s[0])
        if not covering:
            continue
        handlers, seen = [], set()
        catch_all = None
        for span in covering:
            for type_idx, h in ranges[span]:
                if type_idx == CATCH_ALL:
                    catch_all = catch_all if catch_all is not None else h
                elif type_idx not in seen:
                    seen.add(type_idx)
                    handlers.append(Handler(type_idx, h))
        if catch_all is not None:
            handlers.append(Handler(CATCH_ALL, catch_all))
        handlers = tuple(handlers)
        if pieces and pieces[-1].end == lo and pieces[-1].handlers == handlers:
            pieces[-1] = SymTry(pieces[-1].start, hi, handlers)
        else:
            pieces.append(SymTry(lo, hi, handlers))
    return pieces


# -- disassembly ------------------------------------------------------------

def _flag_words(value: int, table: dict) -> list[str]:
    words = []
    for name, bit in table.items():
        if value & bit:
            words.append(name)
            value &= ~bit
    if value:
        words.append(hex(value))
    return words


def _decl(flags: list[str], rest: str) -> str:
    return " ".join(flags + [rest])


def disassemble(dex: DexFile) -> str:
    """Render a model as assembler source.

    Debug info, annotations and static values have no syntax here and are
    left out.
    """
    out: list[str] = []
    for cd in dex.class_defs:
        desc = dex.class_descriptor(cd)
        out.append(_decl(".class".split() + _flag_words(cd.access_flags, CLASS_FLAGS), desc))
        if cd.superclass_idx != NO_INDEX:
            out.append(f".super {dex.type_desc(cd.superclass_idx)}")
        for t in cd.interfaces:
            out.append(f".implements {dex.type_desc(t)}")
        if cd.source_file_idx != NO_INDEX:
            out.append(f".source {json.dumps(dex.strings[cd.source_file_idx])}")
        for ef in cd.static_fields + cd.instance_fields:
            _, name, typ = dex.field_parts(ef.field_idx)
            out.append("")
            out.append(_decl([".field"] + _flag_words(ef.access_flags, FIELD_FLAGS), f"{name}:{typ}"))
        for em in cd.direct_methods + cd.virtual_methods:
            out.append("")
            out.extend(_disassemble_method(dex, em))
        out.append(".end class")
        out.append("")
    return "\n".join(out)


def _disassemble_method(dex: DexFile, em: EncodedMethod) -> list[str]:
    _, name, params, ret = dex.method_parts(em.method_idx)
    lines = [_decl([".method"] + _flag_words(em.access_flags, METHOD_FLAGS), f"{name}({''.join(params)}){ret}")]
    code = em.code
    if code is None:
        lines.append(".end method")
        return lines
    where = dex.method_signature(em.method_idx)
    for k, insn in enumerate(code.instructions):
        if insn.opaque:
            raise OpaqueRegion(f"{where}: instruction {k} ({insn.op}) is outside the supported subset")
    insns, tries = to_symbolic(code)
    n = len(insns)
    marks = set()
    for insn in insns:
        if insn.target is not None:
            marks.add(insn.target)
    for t in tries:
        marks.update((t.start, t.end))
        marks.update(h.addr for h in t.handlers)
    names = {idx: f"L{i}" for i, idx in enumerate(sorted(marks))}

    lines.append(f"    .registers {code.registers_size}")
    for k, insn in enumerate(insns + [None]):
        if k in names:
            lines.append(f":{names[k]}")
        if k < n:
            lines.append("    " + _format_insn(dex, insn, names))
    for t in tries:
        for h in t.handlers:
            if h.type_idx == CATCH_ALL:
                lines.append(f"    .catchall :{names[t.start]} :{names[t.end]} :{names[h.addr]}")
            else:
                lines.append(f"    .try :{names[t.start]} :{names[t.end]} catch "
                             f"{dex.type_desc(h.type_idx)} :{names[h.addr]}")
    lines.append(".end method")
    return lines


def _format_insn(dex: DexFile, insn: Instruction, names: dict) -> str:
    parts = []
    for kind in SHAPES[insn.op]:
        if kind == "r":
            parts.append(f"v{insn.regs[len(parts)]}")
        elif kind == "R":
            parts.append("{" + ", ".join(f"v{r}" for r in insn.regs) + "}")
        elif kind == "i":
            parts.append(str(insn.literal))
        elif kind == "s":
            parts.append(json.dumps(dex.strings[insn.index]))
        elif kind == "t":
            parts.append(dex.type_desc(insn.index))
        elif kind == "m":
            parts.append(dex.method_signature(insn.index))
        elif kind == "l":
            parts.append(f":{names[insn.target]}")
    return f"{insn.op} {', '.join(parts)}".rstrip()
