"""Command-line entry point: ``dexweaver <subcommand> ...``.

Machine-readable results go to stdout as JSON, diagnostics to stderr as a
JSON object with ``error`` and ``message``.  ``DEXWEAVER_LOG`` sets the log
level (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bench import (
    SYNTHETIC_AD_PACKAGE, PipelineConfigs, bench_corpus, fit_linear, report, run_pipeline,
    synthetic_apk, write_csv,
)
from .budget import MemoryBudget
from .corpus import permission_map as fixture_map
from .dex.reader import parse_dex
from .dex.writer import write_dex
from .errors import ConfigError, DegenerateSamples, DexWeaverError
from .interp import ApiEnvironment, Interpreter, load_env
from .microasm import assemble, disassemble
from .package import (
    generate_identity, load_identity, repack, save_identity, sign, unpack, verify, write_zip,
)
from .passes import AdConfig, InstrumentationReport, WeaveConfig, neutralize_ads, weave_permissions
from .passes.adremove import KNOWN_AD_PACKAGES
from .policy import PermissionMap, Policy, default_map

log = logging.getLogger("dexweaver")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PARTIAL = 2
PLACEHOLDER_MANIFEST = b'<manifest package="dexweaver.app"/>\n'


def _diag(error: str, message: str, **extra) -> None:
    print(json.dumps({"error": error, "message": message, **extra}), file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None


def _write(path, data) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        Path(path).write_text(data, encoding="utf-8")
    else:
        Path(path).write_bytes(data)


def _load_dex(path):
    """A DEX model from a .dex file, an archive holding classes.dex, or assembler text."""
    data = _read(path)
    if data.startswith(b"PK"):
        return parse_dex(unpack(data).dex)
    if data.startswith(b"dex\n"):
        return parse_dex(data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"{path}: neither a DEX file, an archive nor assembler text") from None
    return assemble(text)


def _packages(value: str) -> list[str]:
    return [v for v in value.split(",") if v]


def _add_ads(parser) -> None:
    parser.add_argument("--packages", "--ads", dest="ads", action="append", type=_packages,
                        metavar="P1,P2", help="comma-separated ad package prefixes (repeatable)")


def _pmap(path) -> PermissionMap:
    return PermissionMap.load(path) if path else default_map()


def _ad_config(args) -> AdConfig:
    packages = [p for group in args.ads or () for p in group]
    if getattr(args, "ad_config", None):
        data = json.loads(_read(args.ad_config).decode("utf-8"))
        if not isinstance(data, dict) or not isinstance(data.get("ad_packages"), list):
            raise ConfigError(f'{args.ad_config}: expected {{"ad_packages": [...]}}')
        packages += data["ad_packages"]
    return AdConfig(tuple(packages) if packages else KNOWN_AD_PACKAGES)


# -- subcommands ---------------------------------------------------------------

def cmd_asm(args) -> int:
    dex = assemble(_read(args.input).decode("utf-8"))
    data = write_dex(dex)
    if args.apk:
        data = write_zip([("AndroidManifest.xml", PLACEHOLDER_MANIFEST), ("classes.dex", data)])
    _write(args.output, data)
    return EXIT_OK


def cmd_disasm(args) -> int:
    text = disassemble(_load_dex(args.input))
    if args.output:
        _write(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _pass_command(args, run) -> int:
    dex, rep = run(_load_dex(args.input))
    _write(args.output, write_dex(dex))
    if args.report:
        _write(args.report, json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    _emit(rep.to_dict())
    return EXIT_PARTIAL if rep.skipped else EXIT_OK


def cmd_adremove(args) -> int:
    cfg = _ad_config(args)
    return _pass_command(args, lambda dex: neutralize_ads(dex, cfg))


def cmd_weave(args) -> int:
    cfg = WeaveConfig(_pmap(args.map))
    return _pass_command(args, lambda dex: weave_permissions(dex, cfg))


def cmd_run(args) -> int:
    dex = _load_dex(args.input)
    env = load_env(args.env) if args.env else ApiEnvironment()
    if args.policy:
        env = env.with_policy(Policy.load(args.policy), _pmap(args.map), args.app)
    try:
        call_args = json.loads(args.args)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--args is not JSON: {exc}") from None
    if not isinstance(call_args, list):
        raise ConfigError("--args must be a JSON list")
    result = Interpreter(dex, env, args.steps).run(args.entry, call_args)
    out = result.to_dict()
    out["decisions"] = [[k, a] for k, a in env.decisions]
    if args.trace == "-":
        out["executed"] = [[sig, addr] for sig, addr in result.executed]
    elif args.trace:
        trace = {**out, "executed": [[sig, addr] for sig, addr in result.executed]}
        _write(args.trace, json.dumps(trace, indent=2, sort_keys=True) + "\n")
    _emit(out)
    return EXIT_OK


def cmd_repack(args) -> int:
    archive = unpack(_read(args.input))
    new_dex = _read(args.dex) if args.dex else archive.dex
    parse_dex(new_dex)  # refuse to package a broken file
    _write(args.output, repack(archive, new_dex))
    return EXIT_OK


def cmd_sign(args) -> int:
    identity = load_identity(args.keystore)
    _write(args.output, sign(_read(args.input), identity))
    return EXIT_OK


def cmd_verify(args) -> int:
    trust = None
    if args.trust:
        raw = _read(args.trust)
        trust = load_identity(args.trust) if raw.lstrip().startswith(b"{") else raw
    result = verify(_read(args.input), trust)
    _emit(result.to_dict())
    return EXIT_OK if result else EXIT_FAILURE


def cmd_keygen(args) -> int:
    save_identity(generate_identity(args.seed, args.cn), args.output)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    apk = _read(args.input)
    identity = load_identity(args.keystore)
    if args.policy:
        Policy.load(args.policy)  # validated up front; deployed next to the app
    configs = PipelineConfigs(
        ads=None if args.no_adremove else _ad_config(args),
        weave=None if args.no_weave else WeaveConfig(_pmap(args.map)),
        identity=identity,
        strict=False,
    )
    record = run_pipeline(apk, configs, _budget(args), Path(args.input).stem)
    rep = record.report or InstrumentationReport()
    out_dir = Path(args.out_dir)
    if record.ok:
        _write(out_dir / "out.apk", record.output)
        if args.policy:
            _write(out_dir / "policy.json", _read(args.policy))
        code = EXIT_PARTIAL if rep.skipped else EXIT_OK
    else:
        stage = record.failed_stage
        _diag(record.outcomes[stage], record.details.get(stage, ""), stage=stage)
        code = EXIT_FAILURE
    _write(out_dir / "report.json",
           json.dumps({"report": rep.to_dict(), "bench": record.to_dict(), "exit_code": code},
                      indent=2, sort_keys=True) + "\n")
    log.info("pipeline %s: exit %d", args.input, code)
    return code


def _budget(args) -> MemoryBudget | None:
    if args.budget_mib is None:
        return None
    try:
        return MemoryBudget(args.budget_mib)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _bench_inputs(args):
    apps = []
    if args.corpus:
        root = Path(args.corpus)
        if not root.is_dir():
            raise ConfigError(f"no such corpus directory: {root}")
        for path in sorted(root.iterdir()):
            if path.suffix == ".apk":
                apps.append((path.stem, path.read_bytes()))
            elif path.suffix == ".dex":
                apps.append((path.stem, write_zip([("AndroidManifest.xml", PLACEHOLDER_MANIFEST),
                                                   ("classes.dex", path.read_bytes())])))
    for size in args.synthetic or ():
        for rep in range(args.repeat):
            apps.append((f"synthetic-{size:g}k-{rep}", synthetic_apk(size)))
    return apps


def cmd_bench(args) -> int:
    pmap = PermissionMap({**dict(fixture_map()), **dict(_pmap(args.map))})
    packages = tuple(p for group in args.ads or () for p in group)
    ads = AdConfig(packages or KNOWN_AD_PACKAGES + (SYNTHETIC_AD_PACKAGE,))
    identity = load_identity(args.keystore) if args.keystore else generate_identity(seed=0)
    configs = PipelineConfigs(ads, WeaveConfig(pmap), identity, strict=not args.lenient)
    records = bench_corpus(_bench_inputs(args), configs, _budget(args), warmup=args.warmup)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            write_csv(records, fh)
    summary = report(records)
    if args.summary_csv:
        _write(args.summary_csv, summary.to_csv())
    sys.stdout.write(summary.to_text())
    ok = [r for r in records if r.ok]
    try:
        fit = fit_linear([(r.dex_size_kib, r.total_seconds) for r in ok])
    except DegenerateSamples:
        pass
    else:
        sign = "-" if fit.b < 0 else "+"
        print(f"fit: t = {fit.a:.6g} * KiB {sign} {abs(fit.b):.6g}  (residual SE {fit.residual_se:.3g} s, n={fit.n})")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dexweaver", description="Rewrite, run, package and sign DEX bytecode.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("asm", help="assemble a text source into a DEX file")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--apk", action="store_true", help="wrap the result in a minimal archive")
    s.set_defaults(func=cmd_asm)

    s = sub.add_parser("disasm", help="print a DEX file as assembler text")
    s.add_argument("input")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_disasm)

    s = sub.add_parser("adremove", help="make ad-library try blocks throw on entry")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    _add_ads(s)
    s.add_argument("--ad-config", help='JSON file {"ad_packages": [...]}')
    s.add_argument("--report", help="also write the report JSON here")
    s.set_defaults(func=cmd_adremove)

    s = sub.add_parser("weave", help="wrap permission-protected calls in policy checks")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--map", help="permission map JSON (default: bundled map)")
    s.add_argument("--report", help="also write the report JSON here")
    s.set_defaults(func=cmd_weave)

    s = sub.add_parser("run", help="interpret a method")
    s.add_argument("input")
    s.add_argument("--entry", required=True, help="method signature, e.g. Lapp/Main;->main()I")
    s.add_argument("--args", default="[]", help="JSON list of arguments")
    s.add_argument("--env", help="JSON file with API bindings")
    s.add_argument("--policy", help="policy JSON answering the woven monitor")
    s.add_argument("--app", default="app", help="application id looked up in the policy")
    s.add_argument("--map", help="permission map JSON used with --policy")
    s.add_argument("--steps", type=int, default=100_000, help="step budget")
    s.add_argument("--trace", nargs="?", const="-", metavar="FILE",
                   help="write result plus every executed instruction to FILE (stdout if omitted)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("repack", help="rebuild an archive around a new classes.dex")
    s.add_argument("input")
    s.add_argument("--dex", help="replacement classes.dex (default: keep the current one)")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_repack)

    s = sub.add_parser("sign", help="sign an archive")
    s.add_argument("input")
    s.add_argument("--keystore", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_sign)

    s = sub.add_parser("verify", help="check an archive's signature")
    s.add_argument("input")
    s.add_argument("--trust", help="expected signer: PEM/DER certificate or keystore JSON")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("keygen", help="create a keystore with a self-signed certificate")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--seed", type=int, help="derive the key deterministically")
    s.add_argument("--cn", default="dexweaver", help="certificate common name")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("pipeline", help="unpack, instrument, repack and sign")
    s.add_argument("input")
    s.add_argument("--keystore", required=True)
    s.add_argument("--out-dir", required=True)
    _add_ads(s)
    s.add_argument("--ad-config")
    s.add_argument("--map")
    s.add_argument("--policy")
    s.add_argument("--no-adremove", action="store_true")
    s.add_argument("--no-weave", action="store_true")
    s.add_argument("--budget-mib", type=float)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("bench", help="time the pipeline over a corpus")
    s.add_argument("--corpus", help="directory of .apk or .dex files")
    s.add_argument("--synthetic", type=float, nargs="+", metavar="KIB", help="also time synthetic inputs")
    s.add_argument("--repeat", type=int, default=1, help="copies per synthetic size")
    s.add_argument("--budget-mib", type=float)
    s.add_argument("--csv", help="per-stage samples")
    s.add_argument("--summary-csv")
    s.add_argument("--keystore")
    s.add_argument("--map")
    _add_ads(s)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--lenient", action="store_true", help="skipped methods do not fail the instrument stage")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("DEXWEAVER_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DexWeaverError as exc:
        _diag(type(exc).__name__, str(exc))
    except OSError as exc:
        _diag(type(exc).__name__, str(exc), path=exc.filename)
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
