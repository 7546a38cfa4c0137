"""Stage timing, success accounting and the time-vs-size linear model.

A pipeline run goes parse -> instrument -> write -> repack -> sign.  Each
stage is timed with a monotonic clock; the first failing stage records its
error name and nothing after it runs.  An optional memory budget charges the
parsed model and every later intermediate against a heap ceiling.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from fractions import Fraction
from dataclasses import dataclass, field, replace

from .budget import MemoryBudget, footprint
from .dex.model import DexFile
from .dex.reader import parse_dex
from .dex.writer import write_dex
from .errors import DegenerateSamples, DexWeaverError
from .microasm import assemble
from .package import SigningIdentity, generate_identity, repack, sign, unpack, write_zip
from .passes import AdConfig, InstrumentationReport, WeaveConfig, neutralize_ads, weave_permissions

STAGES = ("parse", "instrument", "write", "repack", "sign")
CSV_COLUMNS = ("app", "dex_size_kib", "stage", "seconds", "outcome")
OK = "ok"


@dataclass
class BenchRecord:
    app: str
    dex_size_kib: float
    seconds: dict[str, float] = field(default_factory=dict)
    outcomes: dict[str, str] = field(default_factory=dict)
    details: dict[str, str] = field(default_factory=dict)
    report: InstrumentationReport | None = None
    output: bytes | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return all(self.outcomes.get(s) == OK for s in STAGES)

    @property
    def failed_stage(self) -> str | None:
        for s in STAGES:
            if self.outcomes.get(s, OK) != OK:
                return s
        return None

    @property
    def total_seconds(self) -> float:
        return sum(self.seconds.values())

    def rows(self) -> list[tuple]:
        return [(self.app, self.dex_size_kib, s, self.seconds[s], self.outcomes[s])
                for s in STAGES if s in self.outcomes]

    def to_dict(self) -> dict:
        return {
            "app": self.app,
            "dex_size_kib": self.dex_size_kib,
            "stages": [{"stage": s, "seconds": self.seconds[s], "outcome": self.outcomes[s],
                        **({"detail": self.details[s]} if s in self.details else {})}
                       for s in STAGES if s in self.outcomes],
            "ok": self.ok,
        }


@dataclass(frozen=True)
class PipelineConfigs:
    """Which passes run and who signs.  ``strict`` fails the instrument
    stage when any method had to be skipped."""

    ads: AdConfig | None = None
    weave: WeaveConfig | None = None
    identity: SigningIdentity | None = None
    strict: bool = True


def _instrument(dex, configs: PipelineConfigs):
    report = InstrumentationReport()
    if configs.ads is not None:
        dex, r = neutralize_ads(dex, configs.ads)
        report = report.merge(r)
    if configs.weave is not None:
        dex, r = weave_permissions(dex, configs.weave)
        report = report.merge(r)
    return dex, report


class _SkippedMethods(DexWeaverError):
    pass


def run_pipeline(apk: bytes, configs: PipelineConfigs, budget: MemoryBudget | None = None,
                 app: str = "app") -> BenchRecord:
    """Run every stage in order; errors end the run and are recorded, never raised."""
    identity = configs.identity or generate_identity(seed=0)
    record = BenchRecord(app, 0.0)
    tracker = budget.tracker("processing " + app) if budget is not None else None
    state = {}

    def parse():
        archive = unpack(apk)
        record.dex_size_kib = len(archive.dex) / 1024
        state["archive"] = archive
        state["dex"] = parse_dex(archive.dex, tracker=tracker)

    def instrument():
        dex, report = _instrument(state["dex"], configs)
        record.report = report
        if tracker is not None and dex is not state["dex"]:
            tracker.charge(footprint(dex))
        state["dex"] = dex
        if configs.strict and report.skipped:
            first = report.skipped[0]
            err = _SkippedMethods(f"{report.n_skipped} method(s) skipped; first: {first.method}: {first.detail}")
            err.name = first.reason
            raise err

    def write():
        state["bytes"] = write_dex(state["dex"])
        if tracker is not None:
            tracker.charge(len(state["bytes"]))

    def do_repack():
        state["apk"] = repack(state["archive"], state["bytes"])
        if tracker is not None:
            tracker.charge(len(state["apk"]))

    def do_sign():
        record.output = sign(state["apk"], identity)

    for stage, fn in zip(STAGES, (parse, instrument, write, do_repack, do_sign)):
        t0 = time.perf_counter()
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - every stage error becomes a record entry
            record.seconds[stage] = time.perf_counter() - t0
            record.outcomes[stage] = getattr(exc, "name", None) or type(exc).__name__
            record.details[stage] = str(exc)
            break
        record.seconds[stage] = time.perf_counter() - t0
        record.outcomes[stage] = OK
    return record


def bench_corpus(apps, configs: PipelineConfigs, budget: MemoryBudget | None = None,
                 warmup: int = 1) -> list[BenchRecord]:
    """Time each ``(name, apk)`` pair; the first app is also run ``warmup`` times unrecorded."""
    apps = list(apps)
    if configs.identity is None:
        configs = PipelineConfigs(configs.ads, configs.weave, generate_identity(seed=0), configs.strict)
    if apps:
        for _ in range(warmup):
            run_pipeline(apps[0][1], configs, budget, apps[0][0])
    return [run_pipeline(apk, configs, budget, name) for name, apk in apps]


# -- linear model ------------------------------------------------------------

@dataclass(frozen=True)
class LinearFit:
    a: float              # seconds per KiB
    b: float              # seconds
    residual_se: float
    n: int

    def predict(self, x: float) -> float:
        return self.a * x + self.b


def fit_linear(samples) -> LinearFit:
    """Ordinary least squares of t on x over ``(x, t)`` pairs."""
    samples = [(float(x), float(t)) for x, t in samples]
    if len(samples) < 2:
        raise DegenerateSamples(f"need at least 2 samples, got {len(samples)}")
    xs = [x for x, _ in samples]
    ts = [t for _, t in samples]
    if len(set(xs)) < 2:
        raise DegenerateSamples("all samples share the same x")
    if not all(map(math.isfinite, xs + ts)):
        raise DegenerateSamples("samples must be finite")
    # Exact rational arithmetic on each value's shortest decimal form, rounded
    # once: a line given in decimals is recovered to the last bit.
    n = len(samples)
    fx = [Fraction(repr(x)) for x in xs]
    ft = [Fraction(repr(t)) for t in ts]
    mx, mt = sum(fx) / n, sum(ft) / n
    sxx = sum((x - mx) ** 2 for x in fx)
    sxt = sum((x - mx) * (t - mt) for x, t in zip(fx, ft))
    slope = sxt / sxx
    a, b = float(slope), float(mt - slope * mx)
    if n > 2:
        sse = math.fsum((t - (a * x + b)) ** 2 for x, t in samples)
        se = math.sqrt(sse / (n - 2))
    else:
        se = 0.0
    return LinearFit(a, b, se, n)


# -- summary -----------------------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    stage: str
    succeeded: int
    total: int
    min: float | None
    avg: float | None
    median: float | None
    max: float | None

    @property
    def success(self) -> str:
        pct = 100.0 * self.succeeded / self.total if self.total else 0.0
        return f"{self.succeeded}/{self.total} ({pct:.0f}%)"


SUMMARY_COLUMNS = ("stage", "success", "min_s", "avg_s", "median_s", "max_s")


@dataclass
class Summary:
    rows: list[SummaryRow]

    def _cells(self, row: SummaryRow) -> list[str]:
        nums = [row.min, row.avg, row.median, row.max]
        return [row.stage, row.success] + ["" if v is None else f"{v:.6f}" for v in nums]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in self.rows:
            w.writerow(self._cells(row))
        return buf.getvalue()

    def to_text(self) -> str:
        table = [list(SUMMARY_COLUMNS)] + [self._cells(r) for r in self.rows]
        widths = [max(len(r[i]) for r in table) for i in range(len(SUMMARY_COLUMNS))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table) + "\n"


def _row(stage, times, succeeded, total) -> SummaryRow:
    if not times:
        return SummaryRow(stage, succeeded, total, None, None, None, None)
    return SummaryRow(stage, succeeded, total, min(times), statistics.fmean(times),
                      statistics.median(times), max(times))


def report(records) -> Summary:
    """Per-stage and end-to-end statistics; success fractions count every record."""
    records = list(records)
    if not records:
        return Summary([])
    n = len(records)
    rows = []
    for stage in STAGES:
        times = [r.seconds[stage] for r in records if r.outcomes.get(stage) == OK]
        rows.append(_row(stage, times, len(times), n))
    totals = [r.total_seconds for r in records if r.ok]
    rows.append(_row("total", totals, len(totals), n))
    return Summary(rows)


def write_csv(records, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        for app, size, stage, seconds, outcome in r.rows():
            w.writerow((app, f"{size:.3f}", stage, f"{seconds:.6f}", outcome))


# -- synthetic inputs ----------------------------------------------------------

SYNTHETIC_AD_PACKAGE = "com.ads.synth"

_APP_METHOD = """\
.method public static work{m}(I)I
    .registers 6
    const/16 v0, {m}
    new-instance v1, Lapi/Gps;
    invoke-virtual {{v1}}, Lapi/Gps;->getLocation()I
    move-result v2
    if-eqz v2, :skip
    const-string v3, "synthetic"
    invoke-static {{v3}}, Lapi/Log;->d(Ljava/lang/String;)V
:skip
    invoke-static {{}}, Lapi/Net;->ping()I
    move-result v4
    move v0, v4
    invoke-static {{v0}}, Lapi/Log;->i(I)V
    new-instance v1, Lapi/Camera;
    invoke-virtual {{v1}}, Lapi/Camera;->takePicture()V
    invoke-static {{v5}}, Lapi/Log;->i(I)V
    return v0
.end method
"""

_AD_METHOD = """\
.method public static load{m}()I
    .registers 2
    const/4 v0, 0
:start
    invoke-static {{}}, Lcom/ads/net/Http;->fetchAd()I
    move-result v0
    invoke-static {{v0}}, Lcom/ads/net/Http;->show(I)V
:end
    return v0
:handler
    const/4 v1, 7
    return v1
    .try :start :end catch Ljava/io/IOException; :handler
.end method
"""

METHODS_PER_CLASS = 16


def _synthetic_source(n_classes: int) -> str:
    parts = []
    for c in range(n_classes):
        parts.append(f".class public Lcom/synth/app/C{c};\n.super Ljava/lang/Object;\n")
        parts.extend(_APP_METHOD.format(m=m) for m in range(METHODS_PER_CLASS))
        parts.append(".end class\n")
        parts.append(f".class public Lcom/ads/synth/A{c};\n.super Ljava/lang/Object;\n")
        parts.extend(_AD_METHOD.format(m=m) for m in range(METHODS_PER_CLASS // 4))
        parts.append(".end class\n")
    return "".join(parts)


def _replicated(n: int) -> DexFile:
    """The template class pair copied ``n`` times under fresh names.

    Template bodies reference only API members, so copies share code
    items and differ just in class and method indices.
    """
    template = assemble(_synthetic_source(1))
    sigs = [(template.class_descriptor(cd), template.method_parts(em.method_idx))
            for cd in template.class_defs for em in cd.methods]

    def renamed(desc: str, i: int) -> str:
        return desc.replace("C0;", f"C{i};").replace("A0;", f"A{i};")

    grown = template.extended(
        types=[renamed(d, i) for d, _ in sigs for i in range(n)],
        methods=[(renamed(cls, i), name, params, ret)
                 for _, (cls, name, params, ret) in sigs for i in range(n)],
    )
    table = grown.method_table()
    class_defs = []
    for i in range(n):
        for cd in grown.class_defs:
            def moved(group):
                return [replace(em, method_idx=table[renamed(grown.method_signature(em.method_idx), i)])
                        for em in group]
            class_defs.append(replace(
                cd, type_idx=grown.type_index(renamed(grown.class_descriptor(cd), i)),
                direct_methods=moved(cd.direct_methods), virtual_methods=moved(cd.virtual_methods)))
    return replace(grown, class_defs=class_defs)


def synthetic_dex(size_kib: float) -> bytes:
    """A valid DEX of at least ``size_kib`` KiB built from replicated method bodies."""
    target = size_kib * 1024
    one, two = len(write_dex(_replicated(1))), len(write_dex(_replicated(2)))
    per_copy = two - one
    n = max(1, math.ceil((target - one) / per_copy) + 1)
    data = write_dex(_replicated(n))
    while len(data) < target:
        n += max(1, math.ceil((target - len(data)) / per_copy))
        data = write_dex(_replicated(n))
    return data


def synthetic_apk(size_kib: float) -> bytes:
    manifest = b'<manifest package="com.synth"/>\n'
    return write_zip([("AndroidManifest.xml", manifest), ("classes.dex", synthetic_dex(size_kib))])
