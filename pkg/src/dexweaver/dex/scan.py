"""Read-only scans over a model: try blocks in given packages, protected call sites."""

from __future__ import annotations

from dataclasses import dataclass

from .model import ClassDef, DexFile, EncodedMethod, TryItem


def in_packages(package: str, prefixes) -> bool:
    """Package-boundary prefix match: ``com.ads`` matches ``com.ads.x``, not ``com.adsense``."""
    for prefix in prefixes:
        prefix = prefix.strip(".")
        if package == prefix or package.startswith(prefix + "."):
            return True
    return False


def find_try_blocks(dex: DexFile, packages) -> list[tuple[ClassDef, EncodedMethod, TryItem]]:
    packages = list(packages)
    if not packages:
        return []
    out = []
    for cd in dex.class_defs:
        if not in_packages(dex.package_name(cd), packages):
            continue
        for em in cd.methods:
            if em.code is not None:
                out.extend((cd, em, t) for t in em.code.tries)
    return out


@dataclass(frozen=True)
class CallSite:
    class_desc: str
    method: str          # signature of the enclosing method
    method_idx: int      # its method pool index
    insn_index: int      # position in the instruction list
    addr: int            # code-unit address
    target: str          # signature of the invoked API method

    @property
    def key(self) -> str:
        return self.target


def find_protected_invocations(dex: DexFile, mapping) -> list[CallSite]:
    """Every invoke whose callee signature is a key of ``mapping``, in instruction order."""
    keys = mapping.keys() if hasattr(mapping, "keys") else mapping
    if not keys:
        return []
    wanted = {}
    for i in range(len(dex.methods)):
        sig = dex.method_signature(i)
        if sig in keys:
            wanted[i] = sig
    if not wanted:
        return []
    out = []
    for cd in dex.class_defs:
        desc = dex.class_descriptor(cd)
        for em in cd.methods:
            if em.code is None:
                continue
            addr = 0
            owner = None
            for k, insn in enumerate(em.code.instructions):
                if insn.is_invoke and insn.index in wanted:
                    if owner is None:
                        owner = dex.method_signature(em.method_idx)
                    out.append(CallSite(desc, owner, em.method_idx, k, addr, wanted[insn.index]))
                addr += insn.size
    return out
