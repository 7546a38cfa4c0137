"""Make every try block of an ad library throw on entry."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

from ..dex.code import to_symbolic
from ..dex.model import CATCH_ALL, DexFile
from ..dex.opcodes import Instruction
from ..dex.scan import in_packages
from ..errors import ConfigError, LayoutOverflow, RegisterPressure, UnsupportedRegion
from .relocate import Insertion, splice
from .report import InstrumentationReport

FALLBACK_EXCEPTION = "Ljava/lang/RuntimeException;"
PASS_NAME = "adremove"
_PACKAGE_RE = re.compile(r"^[A-Za-z_$][\w$]*(\.[A-Za-z_$][\w$]*)*$")

# well-known ad library packages, usable as a default
KNOWN_AD_PACKAGES = ("com.google.ads", "com.google.android.gms.ads", "com.admob.android.ads",
                     "com.millennialmedia", "com.mopub", "com.inmobi")


@dataclass(frozen=True)
class AdConfig:
    ad_packages: tuple[str, ...] = ()

    def __post_init__(self):
        packages = tuple(self.ad_packages)
        for p in packages:
            if not isinstance(p, str) or not _PACKAGE_RE.match(p):
                raise ConfigError(f"bad package prefix {p!r}")
        object.__setattr__(self, "ad_packages", packages)


def thrown_type(dex: DexFile, handlers) -> str:
    first = handlers[0].type_idx
    return FALLBACK_EXCEPTION if first == CATCH_ALL else dex.type_desc(first)


def neutralize_ads(dex: DexFile, cfg: AdConfig) -> tuple[DexFile, InstrumentationReport]:
    """Inject ``new-instance; invoke-direct <init>; throw`` at the start of every ad try block."""
    report = InstrumentationReport()
    if not cfg.ad_packages:
        return dex, report
    wanted = set()
    for cd in dex.class_defs:
        if in_packages(dex.package_name(cd), cfg.ad_packages):
            for em in cd.methods:
                if em.code is not None:
                    wanted.update(thrown_type(dex, t.handlers) for t in em.code.tries)
    if not wanted:
        return dex, report

    grown = dex.extended(methods=[f"{t}-><init>()V" for t in sorted(wanted)])
    table = grown.method_table()
    class_defs = []
    for cd in grown.class_defs:
        if not in_packages(grown.package_name(cd), cfg.ad_packages):
            class_defs.append(cd)
            continue
        groups = {}
        for name in ("direct_methods", "virtual_methods"):
            methods = []
            for em in getattr(cd, name):
                if em.code is not None and em.code.tries:
                    sig = grown.method_signature(em.method_idx)
                    try:
                        code = _neutralize(grown, em.code, table)
                    except (RegisterPressure, LayoutOverflow, UnsupportedRegion) as exc:
                        report.skip(PASS_NAME, sig, exc, len(em.code.tries))
                    else:
                        report.n_try_neutralized += len(em.code.tries)
                        report.registers_grown[sig] = 1
                        em = replace(em, code=code)
                methods.append(em)
            groups[name] = methods
        class_defs.append(replace(cd, **groups))

    if report.n_try_neutralized == 0:
        return dex, report
    out = replace(grown, class_defs=class_defs)
    if report.skipped:
        out = out.compacted()
    return out, report


def _neutralize(dex: DexFile, code, table) -> object:
    v = code.registers_size - code.ins_size
    _, tries = to_symbolic(code)
    blocks = []
    for t in tries:
        exc = thrown_type(dex, t.handlers)
        blocks.append(Insertion(t.start, (
            Instruction("new-instance", (v,), index=dex.type_index(exc)),
            Instruction("invoke-direct", (v,), index=table[f"{exc}-><init>()V"]),
            Instruction("throw", (v,)),
        ), redirect=True))
    return splice(code, blocks, extra_regs=1)
