"""Insert instruction blocks into a method and fix everything that moves.

A method grows by ``extra_regs`` registers.  Dalvik keeps parameters in the
highest registers, so every reference to a parameter register moves up by
the same amount; the new registers sit just below the parameters and are
free for injected code.  Branch targets, try ranges and handler addresses
are recomputed from instruction indices, and ``goto`` forms are widened when
their displacement grows past what the original encoding holds.
"""

from __future__ import annotations

from bisect import bisect_left
from collections import defaultdict
from dataclasses import dataclass, replace

from ..dex.code import SymTry, layout, to_symbolic
from ..dex.model import CodeItem, Handler
from ..dex.opcodes import Instruction, check_registers
from ..errors import MalformedCode, RegisterPressure, UnsupportedRegion

PAYLOAD_FORMATS = frozenset({"31t", "payload"})


@dataclass(frozen=True)
class Insertion:
    """A block of code placed before original instruction ``at``.

    Branch targets inside ``code`` are indices relative to the block start;
    ``len(code)`` means "whatever follows the block".  With ``redirect``,
    original branches and handlers aimed at ``at`` enter the block instead
    of skipping it.  ``affinity`` says which neighbour's try ranges the
    block joins: ``"next"`` (instruction ``at``) or ``"prev"`` (``at - 1``).
    """

    at: int
    code: tuple[Instruction, ...]
    redirect: bool = False
    affinity: str = "next"

    def __post_init__(self):
        if self.affinity not in ("next", "prev"):
            raise ValueError(f"affinity must be 'next' or 'prev', not {self.affinity!r}")


def param_shift(code: CodeItem, extra_regs: int):
    """The register renumbering that growing ``code`` by ``extra_regs`` implies."""
    base = code.registers_size - code.ins_size

    def shift(r: int) -> int:
        return r + extra_regs if r >= base else r

    return shift


def splice(code: CodeItem, insertions, extra_regs: int = 0) -> CodeItem:
    """Apply several insertions to ``code`` in one relocation."""
    insertions = list(insertions)
    if extra_regs < 0:
        raise ValueError("extra_regs must be >= 0")
    if not any(b.code for b in insertions) and extra_regs == 0:
        return code
    for insn in code.instructions:
        if insn.fmt in PAYLOAD_FORMATS:
            raise UnsupportedRegion(f"method carries a {insn.op} payload that cannot be moved")
    insns, tries = to_symbolic(code)
    n = len(insns)
    new_size = code.registers_size + extra_regs
    if new_size > 0xFFFF:
        raise RegisterPressure(f"frame of {new_size} registers exceeds the format limit")
    shift = param_shift(code, extra_regs)

    groups: dict[int, list[Insertion]] = defaultdict(list)
    for b in insertions:
        if not 0 <= b.at <= n:
            raise MalformedCode(f"insertion point {b.at} outside 0..{n}")
        groups[b.at].append(b)

    out: list[Instruction] = []
    owner: list[int] = []      # original instruction each new slot belongs to, non-decreasing
    landing = [0] * (n + 1)    # where a branch to original index p now lands
    patch: list[int] = []      # slots holding original branches still aimed at old indices
    for p in range(n + 1):
        blocks = sorted(groups.get(p, ()), key=lambda b: b.affinity != "prev")
        entry = None
        for b in blocks:
            start = len(out)
            if b.redirect and entry is None:
                entry = start
            for insn in b.code:
                if insn.target is not None:
                    insn = replace(insn, target=start + insn.target)
                out.append(insn)
                owner.append(p - 1 if b.affinity == "prev" else p)
        landing[p] = len(out) if entry is None else entry
        if p < n:
            insn = insns[p]
            if extra_regs and insn.regs:
                insn = insn.with_regs(shift(r) for r in insn.regs)
            if insn.target is not None:
                patch.append(len(out))
            out.append(insn)
            owner.append(p)

    for k in patch:
        out[k] = replace(out[k], target=landing[out[k].target])
    new_tries = []
    for t in tries:
        start, end = bisect_left(owner, t.start), bisect_left(owner, t.end)
        new_tries.append(SymTry(start, end, tuple(Handler(h.type_idx, landing[h.addr]) for h in t.handlers)))

    outs = code.outs_size
    for insn in out:
        check_registers(insn)
        for r in insn.regs:
            if r >= new_size:
                raise MalformedCode(f"{insn.op} uses v{r} beyond the grown frame of {new_size}")
    for b in insertions:
        for insn in b.code:
            if insn.is_invoke:
                outs = max(outs, len(insn.regs))
    return layout(out, new_tries, new_size, code.ins_size, outs)


def relocate(code: CodeItem, insert_at: int, injected, extra_regs: int, *,
             redirect: bool = False) -> CodeItem:
    """Insert ``injected`` before instruction index ``insert_at``.

    Branches aimed at ``insert_at`` skip the new code unless ``redirect``
    is set; try ranges containing ``insert_at`` grow to cover it.
    """
    return splice(code, [Insertion(insert_at, tuple(injected), redirect)], extra_regs)
