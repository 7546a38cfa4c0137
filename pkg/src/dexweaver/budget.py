"""Approximate working-set accounting used to emulate small device heaps.

Costs follow a compact JVM-style object layout (16-byte header plus 4-byte
slots), which is what a heap ceiling on a phone actually bounds.  The numbers
are an estimate of model-node sizes, not allocator measurements.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import BudgetExceeded

MIB = 1024 * 1024

OBJECT_HEADER = 16
SLOT = 4


def object_cost(slots: int) -> int:
    return OBJECT_HEADER + SLOT * slots


STRING_BASE = object_cost(3) + OBJECT_HEADER  # String object plus its char[] header
INSTRUCTION_COST = object_cost(5)
POOL_ITEM_COST = object_cost(3)
CODE_ITEM_COST = object_cost(6)
TRY_ITEM_COST = object_cost(3)
HANDLER_COST = object_cost(2)
CLASS_DEF_COST = object_cost(12)
MEMBER_COST = object_cost(3)


def string_cost(text: str) -> int:
    return STRING_BASE + 2 * len(text)


@dataclass(frozen=True)
class MemoryBudget:
    """A heap ceiling in MiB, e.g. 24, 32 or 48 for early Android releases."""

    ceiling_mib: float

    def __post_init__(self):
        if not self.ceiling_mib > 0:
            raise ValueError("memory ceiling must be positive")

    @property
    def ceiling_bytes(self) -> int:
        return int(self.ceiling_mib * MIB)

    def tracker(self, what: str = "") -> MemoryTracker:
        return MemoryTracker(self.ceiling_bytes, what)


class MemoryTracker:
    """Running total of charged bytes; raises once the ceiling is crossed."""

    def __init__(self, ceiling: int | None = None, what: str = ""):
        self.ceiling = ceiling
        self.used = 0
        self.peak = 0
        self.what = what

    def charge(self, nbytes: int) -> None:
        self.used += nbytes
        if self.used > self.peak:
            self.peak = self.used
        if self.ceiling is not None and self.used > self.ceiling:
            raise BudgetExceeded(self.used, self.ceiling, self.what)

    def release(self, nbytes: int) -> None:
        self.used -= nbytes


def footprint(dex) -> int:
    """Estimated size of a parsed model, with the same costs the parser charges."""
    total = sum(string_cost(s) for s in dex.strings)
    total += POOL_ITEM_COST * (len(dex.types) + len(dex.protos) + len(dex.fields) + len(dex.methods))
    for cd in dex.class_defs:
        total += CLASS_DEF_COST
        total += MEMBER_COST * (len(cd.static_fields) + len(cd.instance_fields))
        for em in cd.methods:
            total += MEMBER_COST
            code = em.code
            if code is not None:
                total += CODE_ITEM_COST + INSTRUCTION_COST * len(code.instructions)
                total += sum(TRY_ITEM_COST + HANDLER_COST * len(t.handlers) for t in code.tries)
    return total
