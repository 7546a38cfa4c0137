"""The bundled fixture corpus: assembler sources plus how to run them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .dex.model import DexFile
from .microasm import assemble
from .policy import PermissionMap


@dataclass(frozen=True)
class FixtureInfo:
    name: str
    entries: tuple[str, ...] = ()
    bindings: dict = field(default_factory=dict)
    ad_packages: tuple[str, ...] = ()


def _dir():
    return resources.files(__package__).joinpath("fixtures")


@lru_cache(maxsize=None)
def _index() -> dict:
    return json.loads(_dir().joinpath("index.json").read_text("utf-8"))


def names() -> list[str]:
    return sorted(p.name[:-5] for p in _dir().iterdir() if p.name.endswith(".mdsm"))


def source(name: str) -> str:
    return _dir().joinpath(f"{name}.mdsm").read_text("utf-8")


def load(name: str) -> DexFile:
    return assemble(source(name))


def info(name: str) -> FixtureInfo:
    raw = _index().get(name, {})
    return FixtureInfo(name, tuple(raw.get("entries", ())), dict(raw.get("bindings", {})),
                       tuple(raw.get("ad_packages", ())))


def permission_map() -> PermissionMap:
    """Map covering the toy ``Lapi/...`` methods the fixtures call."""
    return PermissionMap.from_json(json.loads(_dir().joinpath("permission_map.json").read_text("utf-8")))
