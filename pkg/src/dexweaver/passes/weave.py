"""Wrap every permission-protected API call in a policy check.

Each protected call site becomes::

    const-string vK, "<signature>"
    invoke-static {vK}, Monitor->policyAccepts(Ljava/lang/String;)Z
    move-result vB
    if-eqz vB, :stub
    <original invoke>
    [move-result vR]
    goto :end
  :stub
    invoke-static {vK, <receiver>, <args>}, Stub-><name>(Ljava/lang/String;<receiver type><params>)<ret>
    [move-result vR]
  :end

vK and vB are two registers added to the frame.  The stub receives the
signature string first so a denied call can be attributed to its site.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, replace

from ..dex.code import to_symbolic
from ..dex.model import (
    ACC_FINAL, ACC_NATIVE, ACC_PUBLIC, ACC_STATIC, ClassDef, DexFile, EncodedMethod,
    format_signature, parse_signature,
)
from ..dex.opcodes import Instruction
from ..dex.scan import find_protected_invocations
from ..errors import ConfigError, LayoutOverflow, RegisterPressure, UnsupportedRegion
from ..policy import PermissionMap
from .relocate import Insertion, param_shift, splice
from .report import InstrumentationReport

MONITOR_CLASS = "Ldexweaver/Monitor;"
STUB_CLASS = "Ldexweaver/Stub;"
ACCEPT_NAME = "policyAccepts"
OBJECT = "Ljava/lang/Object;"
STRING = "Ljava/lang/String;"
PASS_NAME = "weave"
MAX_INVOKE_ARGS = 5
_CLASS_DESC_RE = re.compile(r"^L[^;\s]+;$")


@dataclass(frozen=True)
class WeaveConfig:
    map: PermissionMap
    monitor_class: str = MONITOR_CLASS
    stub_class: str = STUB_CLASS

    def __post_init__(self):
        for desc in (self.monitor_class, self.stub_class):
            if not _CLASS_DESC_RE.match(desc):
                raise ConfigError(f"bad class descriptor {desc!r}")
        if self.monitor_class == self.stub_class:
            raise ConfigError("monitor and stub classes must differ")

    @property
    def accept_signature(self) -> str:
        return f"{self.monitor_class}->{ACCEPT_NAME}({STRING})Z"

    def stub_signature(self, target: str, invoke_op: str) -> str:
        cls, name, params, ret = parse_signature(target)
        receiver = () if invoke_op.startswith("invoke-static") else (cls,)
        return format_signature(self.stub_class, name, (STRING,) + receiver + params, ret)


def _precheck(insn: Instruction, site) -> Exception | None:
    if insn.op.endswith("/range"):
        return UnsupportedRegion(f"{site.target} is called through {insn.op}")
    if parse_signature(site.target)[1] == "<init>":
        return UnsupportedRegion(f"constructor {site.target} cannot be redirected to a static stub")
    if len(insn.regs) + 1 > MAX_INVOKE_ARGS:
        return RegisterPressure(f"stub call for {site.target} needs {len(insn.regs) + 1} argument registers")
    return None


def weave_permissions(dex: DexFile, cfg: WeaveConfig) -> tuple[DexFile, InstrumentationReport]:
    report = InstrumentationReport()
    sites = find_protected_invocations(dex, cfg.map)
    if not sites:
        return dex, report
    for desc in (cfg.monitor_class, cfg.stub_class):
        if dex.find_class(desc) is not None:
            raise ConfigError(f"{desc} is already defined by the application")

    code_of = {em.method_idx: em.code for _, em in dex.iter_methods()}

    def site_insn(site) -> Instruction:
        return code_of[site.method_idx].instructions[site.insn_index]

    by_method = defaultdict(list)
    for site in sites:
        by_method[site.method].append(site)
    eligible = {}
    for method, group in by_method.items():
        problem = next((p for p in (_precheck(site_insn(s), s) for s in group) if p), None)
        if problem is not None:
            report.skip(PASS_NAME, method, problem, len(group))
        else:
            eligible[method] = group
    if not eligible:
        return dex, report

    stub_sigs = sorted({cfg.stub_signature(s.target, site_insn(s).op)
                        for group in eligible.values() for s in group})
    grown = dex.extended(
        strings=[s.target for group in eligible.values() for s in group],
        types=[cfg.monitor_class, cfg.stub_class, OBJECT],
        methods=[cfg.accept_signature] + stub_sigs,
    )
    table = grown.method_table()
    regrouped = defaultdict(list)
    for site in find_protected_invocations(grown, cfg.map):
        if site.method in eligible:
            regrouped[site.method_idx].append(site)

    used_stubs = set()
    class_defs = []
    for cd in grown.class_defs:
        groups = {}
        touched = False
        for name in ("direct_methods", "virtual_methods"):
            methods = []
            for em in getattr(cd, name):
                group = regrouped.get(em.method_idx)
                if group:
                    touched = True
                    sig = group[0].method
                    try:
                        code, stubs = _wrap_method(grown, em.code, group, cfg, table)
                    except (RegisterPressure, LayoutOverflow, UnsupportedRegion) as exc:
                        report.skip(PASS_NAME, sig, exc, len(group))
                    else:
                        report.n_wrapped += len(group)
                        report.registers_grown[sig] = 2
                        used_stubs |= stubs
                        em = replace(em, code=code)
                methods.append(em)
            groups[name] = methods
        class_defs.append(replace(cd, **groups) if touched else cd)

    if report.n_wrapped == 0:
        return dex, report
    native = ACC_PUBLIC | ACC_STATIC | ACC_NATIVE
    object_idx = grown.type_index(OBJECT)
    class_defs.append(ClassDef(grown.type_index(cfg.monitor_class), ACC_PUBLIC | ACC_FINAL, object_idx,
                               direct_methods=[EncodedMethod(table[cfg.accept_signature], native)]))
    class_defs.append(ClassDef(grown.type_index(cfg.stub_class), ACC_PUBLIC | ACC_FINAL, object_idx,
                               direct_methods=[EncodedMethod(table[s], native)
                                               for s in sorted(used_stubs, key=table.get)]))
    out = replace(grown, class_defs=class_defs)
    if report.skipped:
        out = out.compacted()
    return out, report


def _wrap_method(dex: DexFile, code, sites, cfg: WeaveConfig, table):
    insns, _ = to_symbolic(code)
    base = code.registers_size - code.ins_size
    vk, vb = base, base + 1
    shift = param_shift(code, 2)
    accept = table[cfg.accept_signature]
    blocks, stubs = [], set()
    for site in sites:
        k = site.insn_index
        call = insns[k]
        result = insns[k + 1] if k + 1 < len(insns) and insns[k + 1].op.startswith("move-result") else None
        hr = 1 if result is not None else 0
        stub_sig = cfg.stub_signature(site.target, call.op)
        stubs.add(stub_sig)
        stub_call = Instruction("invoke-static", (vk,) + tuple(shift(r) for r in call.regs),
                                index=table[stub_sig])
        suffix = [Instruction("goto", target=2 + hr), stub_call]
        if result is not None:
            suffix.append(Instruction(result.op, tuple(shift(r) for r in result.regs)))
        prefix = [
            Instruction("const-string", (vk,), index=dex.string_index(site.target)),
            Instruction("invoke-static", (vk,), index=accept),
            Instruction("move-result", (vb,)),
            Instruction("if-eqz", (vb,), target=4 + 1 + hr + 1),
        ]
        blocks.append(Insertion(k, tuple(prefix), redirect=True, affinity="next"))
        blocks.append(Insertion(k + 1 + hr, tuple(suffix), redirect=False, affinity="prev"))
    return splice(code, blocks, extra_regs=2), stubs
