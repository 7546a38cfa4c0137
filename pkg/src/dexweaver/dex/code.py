"""Index-addressed view of a code item and the layout step that fixes addresses.

In the symbolic view, branch targets, try bounds and handler addresses are
instruction *indices*.  :func:`layout` turns that back into a
:class:`CodeItem`, widening ``goto`` forms whose displacement no longer fits.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..errors import LayoutOverflow, MalformedCode
from .model import CodeItem, Handler, TryItem
from .opcodes import Instruction

GOTO_CHAIN = ("goto", "goto/16", "goto/32")


@dataclass(frozen=True)
class SymTry:
    start: int
    end: int  # exclusive instruction index
    handlers: tuple[Handler, ...]  # addr field holds an instruction index


def to_symbolic(code: CodeItem) -> tuple[list[Instruction], list[SymTry]]:
    addrs = code.addresses()
    index_of = {a: i for i, a in enumerate(addrs)}

    def idx(addr: int, what: str) -> int:
        try:
            return index_of[addr]
        except KeyError:
            raise MalformedCode(f"{what} address {addr} is not an instruction boundary") from None

    insns = [replace(i, target=idx(i.target, i.op)) if i.target is not None else i
             for i in code.instructions]
    tries = [SymTry(idx(t.start_addr, "try start"), idx(t.end_addr, "try end"),
                    tuple(Handler(h.type_idx, idx(h.addr, "handler")) for h in t.handlers))
             for t in code.tries]
    return insns, tries


def _needed_goto(off: int) -> str:
    if off != 0 and -128 <= off <= 127:
        return "goto"
    if off != 0 and -32768 <= off <= 32767:
        return "goto/16"
    return "goto/32"


def layout(insns: list[Instruction], tries: list[SymTry], registers_size: int, ins_size: int,
           outs_size: int, debug_info=None) -> CodeItem:
    """Assign addresses to an index-targeted instruction list."""
    insns = list(insns)
    n = len(insns)
    for k, insn in enumerate(insns):
        if insn.target is not None and not 0 <= insn.target < n:
            raise MalformedCode(f"{insn.op} at index {k} targets index {insn.target} outside the method")
    while True:
        addrs = [0]
        for insn in insns:
            addrs.append(addrs[-1] + insn.size)
        changed = False
        for k, insn in enumerate(insns):
            if insn.op in GOTO_CHAIN:
                need = _needed_goto(addrs[insn.target] - addrs[k])
                if GOTO_CHAIN.index(need) > GOTO_CHAIN.index(insn.op):
                    insns[k] = replace(insn, op=need)
                    changed = True
        if not changed:
            break
    out = []
    for k, insn in enumerate(insns):
        if insn.target is not None:
            insn = replace(insn, target=addrs[insn.target])
            if insn.fmt in ("21t", "22t") and not -32768 <= insn.target - addrs[k] <= 32767:
                raise LayoutOverflow(f"{insn.op} displacement no longer fits 16 bits")
        out.append(insn)
    new_tries = []
    for t in tries:
        if not 0 <= t.start < t.end <= n:
            raise MalformedCode(f"empty or out-of-range try [{t.start}, {t.end})")
        new_tries.append(TryItem(addrs[t.start], addrs[t.end] - addrs[t.start],
                                 tuple(Handler(h.type_idx, addrs[h.addr]) for h in t.handlers)))
    return CodeItem(registers_size, ins_size, outs_size, out, new_tries, debug_info)
