"""Permission map, user policy and the accept/deny decision."""

from __future__ import annotations

import json
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .dex.model import parse_signature
from .errors import ConfigError

PERMISSION_RE = re.compile(r"^[A-Z][A-Z0-9_]*$")
NO_GRANT = "no-grant"
UNMAPPED = "unmapped"


def _permission_set(names, where: str) -> frozenset[str]:
    if isinstance(names, str) or not isinstance(names, (list, tuple, set, frozenset)):
        raise ConfigError(f"{where}: expected a list of permission names")
    for name in names:
        if not isinstance(name, str) or not PERMISSION_RE.match(name):
            raise ConfigError(f"{where}: bad permission name {name!r}")
    return frozenset(names)


class PermissionMap(Mapping):
    """API method signature -> permissions it requires."""

    def __init__(self, entries: Mapping | None = None):
        table = {}
        for sig, perms in (entries or {}).items():
            try:
                parse_signature(sig)
            except (TypeError, ValueError):
                raise ConfigError(f"bad method signature {sig!r}") from None
            perms = _permission_set(perms, sig)
            if not perms:
                raise ConfigError(f"{sig}: permission set is empty")
            table[sig] = perms
        self._table = table

    def __getitem__(self, sig: str) -> frozenset[str]:
        return self._table[sig]

    def __iter__(self):
        return iter(sorted(self._table))

    def __len__(self) -> int:
        return len(self._table)

    def __repr__(self) -> str:
        return f"PermissionMap({len(self)} entries)"

    @property
    def permissions(self) -> frozenset[str]:
        out = set()
        for perms in self._table.values():
            out |= perms
        return frozenset(out)

    def to_json(self) -> dict:
        return {sig: sorted(self._table[sig]) for sig in self}

    @classmethod
    def from_json(cls, data) -> PermissionMap:
        if not isinstance(data, dict):
            raise ConfigError("permission map must be a JSON object")
        return cls(data)

    @classmethod
    def load(cls, path) -> PermissionMap:
        return cls.from_json(_read_json(path))


@dataclass(frozen=True)
class Policy:
    per_app: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def grants(self, app: str) -> frozenset[str]:
        return self.per_app.get(app, frozenset())

    def to_json(self) -> dict:
        return {"apps": {app: sorted(perms) for app, perms in sorted(self.per_app.items())}}

    @classmethod
    def from_json(cls, data) -> Policy:
        if not isinstance(data, dict) or not isinstance(data.get("apps", {}), dict):
            raise ConfigError('policy must look like {"apps": {"<app-id>": [...]}}')
        apps = data.get("apps", {})
        return cls({app: _permission_set(perms, f"app {app}") for app, perms in apps.items()})

    @classmethod
    def load(cls, path) -> Policy:
        return cls.from_json(_read_json(path))

    @classmethod
    def allow_all(cls, app: str, pmap: PermissionMap) -> Policy:
        return cls({app: pmap.permissions})


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: not valid UTF-8 JSON ({exc})") from None


def default_map() -> PermissionMap:
    """The small hand-curated map shipped with the package."""
    text = resources.files(__package__).joinpath("data", "permission_map.json").read_text("utf-8")
    return PermissionMap.from_json(json.loads(text))


def methods_for_permissions(pmap: PermissionMap, grants) -> frozenset[str]:
    grants = frozenset(grants)
    return frozenset(sig for sig, perms in pmap.items() if perms & grants)


def policy_has(policy: Policy, app: str, permission: str) -> bool:
    return permission in policy.grants(app)


def policy_accepts(policy: Policy, pmap: PermissionMap, app: str, method: str) -> Decision:
    """Allow a call only if every permission the method needs is granted."""
    required = pmap.get(method)
    if required is None:
        return Decision(True, UNMAPPED)
    for perm in sorted(required):
        if not policy_has(policy, app, perm):
            return Decision(False, NO_GRANT)
    return Decision(True, min(required))
