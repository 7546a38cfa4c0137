"""Per-pass accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass(frozen=True)
class SkippedMethod:
    pass_name: str
    method: str
    reason: str   # error class name
    detail: str
    sites: int    # call sites (weave) or try items (adremove) left untouched


@dataclass
class InstrumentationReport:
    n_wrapped: int = 0
    n_try_neutralized: int = 0
    skipped: list[SkippedMethod] = field(default_factory=list)
    registers_grown: dict[str, int] = field(default_factory=dict)

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)

    def skipped_sites(self, pass_name: str | None = None) -> int:
        return sum(s.sites for s in self.skipped if pass_name in (None, s.pass_name))

    def skip(self, pass_name: str, method: str, error: Exception, sites: int) -> None:
        self.skipped.append(SkippedMethod(pass_name, method, type(error).__name__, str(error), sites))

    def merge(self, other: InstrumentationReport) -> InstrumentationReport:
        grown = dict(self.registers_grown)
        for sig, n in other.registers_grown.items():
            grown[sig] = grown.get(sig, 0) + n
        return InstrumentationReport(
            self.n_wrapped + other.n_wrapped,
            self.n_try_neutralized + other.n_try_neutralized,
            self.skipped + other.skipped,
            grown,
        )

    def to_dict(self) -> dict:
        return {
            "n_wrapped": self.n_wrapped,
            "n_try_neutralized": self.n_try_neutralized,
            "n_skipped": self.n_skipped,
            "skipped": [asdict(s) for s in self.skipped],
            "registers_grown": dict(sorted(self.registers_grown.items())),
        }
