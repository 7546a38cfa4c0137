"""Dalvik opcode table and the format-driven instruction codec.

Every opcode of DEX version 035 decodes into an :class:`Instruction`; the
toolchain's *supported subset* (what the assembler, disassembler and
interpreter understand) is :data:`SUBSET`.  Instructions outside the subset
are still fully decoded so pool indices and registers can be remapped, but
they are reported as opaque.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

from ..errors import LayoutOverflow, MalformedCode, RegisterPressure


class OpInfo(NamedTuple):
    code: int
    name: str
    fmt: str
    ref: str | None = None  # pool kind referenced by the index field


# code-unit size of each format
FORMAT_SIZE = {
    "10x": 1, "12x": 1, "11n": 1, "11x": 1, "10t": 1,
    "20t": 2, "22x": 2, "21t": 2, "21s": 2, "21h": 2, "21c": 2,
    "23x": 2, "22b": 2, "22t": 2, "22s": 2, "22c": 2,
    "30t": 3, "32x": 3, "31i": 3, "31t": 3, "31c": 3, "35c": 3, "3rc": 3,
    "51l": 5,
}

# bit width of each register slot, per format
REG_WIDTHS = {
    "10x": (), "12x": (4, 4), "11n": (4,), "11x": (8,), "10t": (), "20t": (),
    "22x": (8, 16), "21t": (8,), "21s": (8,), "21h": (8,), "21c": (8,),
    "23x": (8, 8, 8), "22b": (8, 8), "22t": (4, 4), "22s": (4, 4), "22c": (4, 4),
    "30t": (), "32x": (16, 16), "31i": (8,), "31t": (8,), "31c": (8,),
    "51l": (8,),
}

BRANCH_FORMATS = frozenset({"10t", "20t", "30t", "21t", "22t"})


def _build_table() -> list[OpInfo | None]:
    table: list[OpInfo | None] = [None] * 256

    def put(code, name, fmt, ref=None):
        table[code] = OpInfo(code, name, fmt, ref)

    put(0x00, "nop", "10x")
    put(0x01, "move", "12x")
    put(0x02, "move/from16", "22x")
    put(0x03, "move/16", "32x")
    put(0x04, "move-wide", "12x")
    put(0x05, "move-wide/from16", "22x")
    put(0x06, "move-wide/16", "32x")
    put(0x07, "move-object", "12x")
    put(0x08, "move-object/from16", "22x")
    put(0x09, "move-object/16", "32x")
    put(0x0A, "move-result", "11x")
    put(0x0B, "move-result-wide", "11x")
    put(0x0C, "move-result-object", "11x")
    put(0x0D, "move-exception", "11x")
    put(0x0E, "return-void", "10x")
    put(0x0F, "return", "11x")
    put(0x10, "return-wide", "11x")
    put(0x11, "return-object", "11x")
    put(0x12, "const/4", "11n")
    put(0x13, "const/16", "21s")
    put(0x14, "const", "31i")
    put(0x15, "const/high16", "21h")
    put(0x16, "const-wide/16", "21s")
    put(0x17, "const-wide/32", "31i")
    put(0x18, "const-wide", "51l")
    put(0x19, "const-wide/high16", "21h")
    put(0x1A, "const-string", "21c", "string")
    put(0x1B, "const-string/jumbo", "31c", "string")
    put(0x1C, "const-class", "21c", "type")
    put(0x1D, "monitor-enter", "11x")
    put(0x1E, "monitor-exit", "11x")
    put(0x1F, "check-cast", "21c", "type")
    put(0x20, "instance-of", "22c", "type")
    put(0x21, "array-length", "12x")
    put(0x22, "new-instance", "21c", "type")
    put(0x23, "new-array", "22c", "type")
    put(0x24, "filled-new-array", "35c", "type")
    put(0x25, "filled-new-array/range", "3rc", "type")
    put(0x26, "fill-array-data", "31t")
    put(0x27, "throw", "11x")
    put(0x28, "goto", "10t")
    put(0x29, "goto/16", "20t")
    put(0x2A, "goto/32", "30t")
    put(0x2B, "packed-switch", "31t")
    put(0x2C, "sparse-switch", "31t")
    for i, n in enumerate(["cmpl-float", "cmpg-float", "cmpl-double", "cmpg-double", "cmp-long"]):
        put(0x2D + i, n, "23x")
    for i, n in enumerate(["if-eq", "if-ne", "if-lt", "if-ge", "if-gt", "if-le"]):
        put(0x32 + i, n, "22t")
    for i, n in enumerate(["if-eqz", "if-nez", "if-ltz", "if-gez", "if-gtz", "if-lez"]):
        put(0x38 + i, n, "21t")
    kinds = ["", "-wide", "-object", "-boolean", "-byte", "-char", "-short"]
    for i, k in enumerate(kinds):
        put(0x44 + i, "aget" + k, "23x")
        put(0x4B + i, "aput" + k, "23x")
        put(0x52 + i, "iget" + k, "22c", "field")
        put(0x59 + i, "iput" + k, "22c", "field")
        put(0x60 + i, "sget" + k, "21c", "field")
        put(0x67 + i, "sput" + k, "21c", "field")
    for i, k in enumerate(["virtual", "super", "direct", "static", "interface"]):
        put(0x6E + i, "invoke-" + k, "35c", "method")
        put(0x74 + i, f"invoke-{k}/range", "3rc", "method")
    unops = ["neg-int", "not-int", "neg-long", "not-long", "neg-float", "neg-double",
             "int-to-long", "int-to-float", "int-to-double", "long-to-int", "long-to-float",
             "long-to-double", "float-to-int", "float-to-long", "float-to-double",
             "double-to-int", "double-to-long", "double-to-float", "int-to-byte",
             "int-to-char", "int-to-short"]
    for i, n in enumerate(unops):
        put(0x7B + i, n, "12x")
    binops = []
    for t in ("int", "long"):
        binops += [f"{o}-{t}" for o in ("add", "sub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr", "ushr")]
    for t in ("float", "double"):
        binops += [f"{o}-{t}" for o in ("add", "sub", "mul", "div", "rem")]
    for i, n in enumerate(binops):
        put(0x90 + i, n, "23x")
        put(0xB0 + i, n + "/2addr", "12x")
    for i, n in enumerate(["add-int", "rsub-int", "mul-int", "div-int", "rem-int", "and-int", "or-int", "xor-int"]):
        put(0xD0 + i, n if n == "rsub-int" else n + "/lit16", "22s")
    for i, n in enumerate(["add-int", "rsub-int", "mul-int", "div-int", "rem-int", "and-int",
                           "or-int", "xor-int", "shl-int", "shr-int", "ushr-int"]):
        put(0xD8 + i, n + "/lit8", "22b")
    return table


OPCODES: list[OpInfo | None] = _build_table()
BY_NAME: dict[str, OpInfo] = {op.name: op for op in OPCODES if op is not None}

PAYLOAD_IDENTS = {
    0x0100: "packed-switch-payload",
    0x0200: "sparse-switch-payload",
    0x0300: "fill-array-data-payload",
}
PAYLOAD_NAMES = frozenset(PAYLOAD_IDENTS.values())

# The instruction subset the assembler, disassembler and interpreter speak.
# goto/16 and goto/32 are included because relocation promotes gotos whose
# displacement no longer fits eight bits.
SUBSET = frozenset({
    "nop", "const/4", "const/16", "const-string", "move", "move-object",
    "move-result", "move-result-object", "new-instance", "invoke-static",
    "invoke-virtual", "invoke-direct", "throw", "goto", "goto/16", "goto/32",
    "if-eqz", "return", "return-void", "return-object",
})

INVOKE_NAMES = frozenset(n for n in BY_NAME if n.startswith("invoke-"))


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction.

    ``target`` is an absolute code-unit address inside the owning code item
    for branch formats (for 31t it is the payload address).  ``literal`` is
    the raw signed field value (for the ``high16`` forms that is the upper
    half, not the materialized constant).  Payload pseudo-instructions keep
    their code units verbatim in ``payload``.
    """

    op: str
    regs: tuple[int, ...] = ()
    literal: int | None = None
    index: int | None = None
    target: int | None = None
    payload: tuple[int, ...] | None = None

    @property
    def info(self) -> OpInfo | None:
        return BY_NAME.get(self.op)

    @property
    def fmt(self) -> str:
        if self.payload is not None:
            return "payload"
        return BY_NAME[self.op].fmt

    @property
    def size(self) -> int:
        if self.payload is not None:
            return len(self.payload)
        return FORMAT_SIZE[BY_NAME[self.op].fmt]

    @property
    def opaque(self) -> bool:
        return self.op not in SUBSET

    @property
    def is_branch(self) -> bool:
        return self.payload is None and BY_NAME[self.op].fmt in BRANCH_FORMATS

    @property
    def is_invoke(self) -> bool:
        return self.op in INVOKE_NAMES

    @property
    def ref(self) -> str | None:
        info = BY_NAME.get(self.op)
        return info.ref if info else None

    def with_regs(self, regs) -> Instruction:
        return replace(self, regs=tuple(regs))


def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def _fits_signed(value: int, bits: int) -> bool:
    return -(1 << (bits - 1)) <= value < (1 << (bits - 1))


def check_registers(insn: Instruction) -> None:
    """Raise RegisterPressure if a register does not fit its encoding slot."""
    if insn.payload is not None:
        return
    fmt = BY_NAME[insn.op].fmt
    if fmt == "35c":
        if len(insn.regs) > 5:
            raise RegisterPressure(f"{insn.op} takes at most 5 registers, got {len(insn.regs)}")
        widths = (4,) * len(insn.regs)
    elif fmt == "3rc":
        regs = insn.regs
        if regs and list(regs) != list(range(regs[0], regs[0] + len(regs))):
            raise RegisterPressure(f"{insn.op} register range is not contiguous: {regs}")
        if len(regs) > 255:
            raise RegisterPressure(f"{insn.op} takes at most 255 registers")
        widths = (16,) if regs else ()
        regs = regs[:1]
        for r, w in zip(regs, widths):
            if not 0 <= r + len(insn.regs) - 1 < (1 << w):
                raise RegisterPressure(f"{insn.op} range v{r}.. exceeds 16-bit register space")
        return
    else:
        widths = REG_WIDTHS[fmt]
        if len(insn.regs) != len(widths):
            raise MalformedCode(f"{insn.op} expects {len(widths)} registers, got {len(insn.regs)}")
    for r, w in zip(insn.regs, widths):
        if not 0 <= r < (1 << w):
            raise RegisterPressure(f"{insn.op}: register v{r} does not fit a {w}-bit field")


def decode_one(units, pos: int) -> Instruction:
    """Decode the instruction starting at code-unit ``pos``."""
    n = len(units)
    u0 = units[pos]
    opcode = u0 & 0xFF
    hi = u0 >> 8
    if opcode == 0 and hi in (1, 2, 3):
        ident = u0
        try:
            if ident == 0x0100:
                size = units[pos + 1]
                length = size * 2 + 4
            elif ident == 0x0200:
                size = units[pos + 1]
                length = size * 4 + 2
            else:
                width = units[pos + 1]
                count = units[pos + 2] | (units[pos + 3] << 16)
                length = (count * width + 1) // 2 + 4
        except IndexError:
            raise MalformedCode(f"payload at {pos} runs past end of code") from None
        if pos + length > n:
            raise MalformedCode(f"payload at {pos} runs past end of code")
        return Instruction(PAYLOAD_IDENTS[ident], payload=tuple(units[pos:pos + length]))
    info = OPCODES[opcode]
    if info is None:
        raise MalformedCode(f"unused opcode 0x{opcode:02x} at code unit {pos}")
    fmt = info.fmt
    size = FORMAT_SIZE[fmt]
    if pos + size > n:
        raise MalformedCode(f"{info.name} at {pos} runs past end of code")
    u = units[pos:pos + size]
    name = info.name
    a4, b4 = hi & 0xF, hi >> 4
    if fmt == "10x":
        if hi:
            raise MalformedCode(f"{name} at {pos} has nonzero high byte")
        return Instruction(name)
    if fmt == "12x":
        return Instruction(name, (a4, b4))
    if fmt == "11n":
        return Instruction(name, (a4,), literal=_sext(b4, 4))
    if fmt == "11x":
        return Instruction(name, (hi,))
    if fmt == "10t":
        return Instruction(name, target=pos + _sext(hi, 8))
    if fmt == "20t":
        return Instruction(name, target=pos + _sext(u[1], 16))
    if fmt == "22x":
        return Instruction(name, (hi, u[1]))
    if fmt == "21t":
        return Instruction(name, (hi,), target=pos + _sext(u[1], 16))
    if fmt in ("21s", "21h"):
        return Instruction(name, (hi,), literal=_sext(u[1], 16))
    if fmt == "21c":
        return Instruction(name, (hi,), index=u[1])
    if fmt == "23x":
        return Instruction(name, (hi, u[1] & 0xFF, u[1] >> 8))
    if fmt == "22b":
        return Instruction(name, (hi, u[1] & 0xFF), literal=_sext(u[1] >> 8, 8))
    if fmt == "22t":
        return Instruction(name, (a4, b4), target=pos + _sext(u[1], 16))
    if fmt == "22s":
        return Instruction(name, (a4, b4), literal=_sext(u[1], 16))
    if fmt == "22c":
        return Instruction(name, (a4, b4), index=u[1])
    if fmt == "30t":
        return Instruction(name, target=pos + _sext(u[1] | (u[2] << 16), 32))
    if fmt == "32x":
        return Instruction(name, (u[1], u[2]))
    if fmt == "31i":
        return Instruction(name, (hi,), literal=_sext(u[1] | (u[2] << 16), 32))
    if fmt == "31t":
        return Instruction(name, (hi,), target=pos + _sext(u[1] | (u[2] << 16), 32))
    if fmt == "31c":
        return Instruction(name, (hi,), index=u[1] | (u[2] << 16))
    if fmt == "35c":
        count = hi >> 4
        if count > 5:
            raise MalformedCode(f"{name} at {pos} claims {count} registers")
        g = hi & 0xF
        c, d, e, f = u[2] & 0xF, (u[2] >> 4) & 0xF, (u[2] >> 8) & 0xF, u[2] >> 12
        return Instruction(name, (c, d, e, f, g)[:count], index=u[1])
    if fmt == "3rc":
        return Instruction(name, tuple(range(u[2], u[2] + hi)), index=u[1])
    if fmt == "51l":
        value = u[1] | (u[2] << 16) | (u[3] << 32) | (u[4] << 48)
        return Instruction(name, (hi,), literal=_sext(value, 64))
    raise MalformedCode(f"unhandled format {fmt}")  # pragma: no cover


def decode_all(units) -> list[Instruction]:
    out = []
    pos = 0
    n = len(units)
    while pos < n:
        insn = decode_one(units, pos)
        out.append(insn)
        pos += insn.size
    return out


def encode(insn: Instruction, addr: int) -> list[int]:
    """Encode ``insn`` located at code-unit address ``addr``."""
    if insn.payload is not None:
        return list(insn.payload)
    info = BY_NAME[insn.op]
    fmt = info.fmt
    check_registers(insn)
    op = info.code
    r = insn.regs

    def offset(bits: int) -> int:
        if insn.target is None:
            raise MalformedCode(f"{insn.op} without a target")
        off = insn.target - addr
        if not _fits_signed(off, bits):
            raise LayoutOverflow(f"{insn.op} displacement {off} does not fit {bits} bits")
        return off & ((1 << bits) - 1)

    def lit(bits: int) -> int:
        v = insn.literal or 0
        if not _fits_signed(v, bits):
            raise LayoutOverflow(f"{insn.op} literal {v} does not fit {bits} bits")
        return v & ((1 << bits) - 1)

    def idx(bits: int) -> int:
        v = insn.index
        if v is None or not 0 <= v < (1 << bits):
            raise LayoutOverflow(f"{insn.op} index {v} does not fit {bits} bits")
        return v

    if fmt == "10x":
        return [op]
    if fmt == "12x":
        return [op | (r[0] << 8) | (r[1] << 12)]
    if fmt == "11n":
        return [op | (r[0] << 8) | (lit(4) << 12)]
    if fmt == "11x":
        return [op | (r[0] << 8)]
    if fmt == "10t":
        if insn.target == addr:
            raise LayoutOverflow("goto cannot branch to itself")
        return [op | (offset(8) << 8)]
    if fmt == "20t":
        if insn.target == addr:
            raise LayoutOverflow("goto/16 cannot branch to itself")
        return [op, offset(16)]
    if fmt == "22x":
        return [op | (r[0] << 8), r[1]]
    if fmt == "21t":
        return [op | (r[0] << 8), offset(16)]
    if fmt in ("21s", "21h"):
        return [op | (r[0] << 8), lit(16)]
    if fmt == "21c":
        return [op | (r[0] << 8), idx(16)]
    if fmt == "23x":
        return [op | (r[0] << 8), r[1] | (r[2] << 8)]
    if fmt == "22b":
        return [op | (r[0] << 8), r[1] | (lit(8) << 8)]
    if fmt == "22t":
        return [op | (r[0] << 8) | (r[1] << 12), offset(16)]
    if fmt == "22s":
        return [op | (r[0] << 8) | (r[1] << 12), lit(16)]
    if fmt == "22c":
        return [op | (r[0] << 8) | (r[1] << 12), idx(16)]
    if fmt == "30t":
        v = offset(32)
        return [op, v & 0xFFFF, v >> 16]
    if fmt == "32x":
        return [op, r[0], r[1]]
    if fmt == "31i":
        v = lit(32)
        return [op | (r[0] << 8), v & 0xFFFF, v >> 16]
    if fmt == "31t":
        v = offset(32)
        return [op | (r[0] << 8), v & 0xFFFF, v >> 16]
    if fmt == "31c":
        v = idx(32)
        return [op | (r[0] << 8), v & 0xFFFF, v >> 16]
    if fmt == "35c":
        regs = list(r) + [0] * (5 - len(r))
        c, d, e, f, g = regs
        return [op | (g << 8) | (len(r) << 12), idx(16), c | (d << 4) | (e << 8) | (f << 12)]
    if fmt == "3rc":
        first = r[0] if r else 0
        return [op | (len(r) << 8), idx(16), first]
    if fmt == "51l":
        v = lit(64)
        return [op | (r[0] << 8), v & 0xFFFF, (v >> 16) & 0xFFFF, (v >> 32) & 0xFFFF, v >> 48]
    raise MalformedCode(f"unhandled format {fmt}")  # pragma: no cover


def encode_all(insns) -> list[int]:
    units: list[int] = []
    for insn in insns:
        units.extend(encode(insn, len(units)))
    return units
