import json
import logging
import os

import pytest

import checks
from conftest import fixture_apk
from dexweaver import corpus
from dexweaver.cli import main
from dexweaver.dex import parse_dex, write_dex
from dexweaver.interp import ApiEnvironment
from dexweaver.package import Status, generate_identity, save_identity, unpack, verify

GPS_MAIN = "Lapp/Main;->main()I"


@pytest.fixture
def keystore(tmp_path):
    path = tmp_path / "ks.json"
    save_identity(generate_identity(seed=3), path)
    return path


@pytest.fixture
def toy_map_file(tmp_path, toy_map):
    path = tmp_path / "map.json"
    path.write_text(json.dumps(toy_map.to_json()))
    return path


def _write_source(tmp_path, name):
    path = tmp_path / f"{name}.mdsm"
    path.write_text(corpus.source(name))
    return path


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_asm_disasm_round_trip(tmp_path, capsys):
    src = _write_source(tmp_path, "mixed")
    out = tmp_path / "mixed.dex"
    assert main(["asm", str(src), "-o", str(out)]) == 0
    assert out.read_bytes() == write_dex(corpus.load("mixed"))
    assert main(["disasm", str(out)]) == 0
    text = capsys.readouterr().out
    again = tmp_path / "again.dex"
    (tmp_path / "again.mdsm").write_text(text)
    assert main(["asm", str(tmp_path / "again.mdsm"), "-o", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_asm_apk(tmp_path):
    out = tmp_path / "hello.apk"
    assert main(["asm", str(_write_source(tmp_path, "hello")), "--apk", "-o", str(out)]) == 0
    assert unpack(out.read_bytes()).dex == write_dex(corpus.load("hello"))


def test_adremove(tmp_path, capsys):
    dex = tmp_path / "ads.dex"
    dex.write_bytes(write_dex(corpus.load("ads")))
    out, rep = tmp_path / "out.dex", tmp_path / "rep.json"
    packages = ",".join(corpus.info("ads").ad_packages)
    assert main(["adremove", "--packages", packages, str(dex), "-o", str(out), "--report", str(rep)]) == 0
    report = _json_out(capsys)
    assert report["n_try_neutralized"] > 0
    assert json.loads(rep.read_text()) == report
    parse_dex(out.read_bytes()).validate()


def test_adremove_ad_config_file(tmp_path, capsys):
    dex = tmp_path / "ads.dex"
    dex.write_bytes(write_dex(corpus.load("ads")))
    cfg = tmp_path / "ads.json"
    cfg.write_text(json.dumps({"ad_packages": list(corpus.info("ads").ad_packages)}))
    assert main(["adremove", "--ad-config", str(cfg), str(dex), "-o", str(tmp_path / "o.dex")]) == 0
    assert _json_out(capsys)["n_try_neutralized"] > 0
    cfg.write_text("[]")
    assert main(["adremove", "--ad-config", str(cfg), str(dex), "-o", str(tmp_path / "o.dex")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_weave_and_run_with_policy(tmp_path, capsys, toy_map_file):
    src = _write_source(tmp_path, "gps")
    woven, rep = tmp_path / "woven.dex", tmp_path / "rep.json"
    assert main(["weave", "--map", str(toy_map_file), str(src), "-o", str(woven), "--report", str(rep)]) == 0
    assert _json_out(capsys)["n_wrapped"] == 3
    env = tmp_path / "env.json"
    env.write_text(json.dumps({"bindings": {"Lapi/Gps;->getLocation()I": 42}}))
    policy = tmp_path / "policy.json"
    trace = tmp_path / "trace.json"
    for grants, value in ((["GPS"], 42), ([], 0)):
        policy.write_text(json.dumps({"apps": {"news": grants}}))
        assert main(["run", str(woven), "--entry", GPS_MAIN, "--env", str(env), "--policy", str(policy),
                     "--app", "news", "--map", str(toy_map_file), "--trace", str(trace)]) == 0
        out = _json_out(capsys)
        assert (out["outcome"], out["value"]) == ("return", value)
        assert out["decisions"] == [["Lapi/Gps;->getLocation()I", bool(grants)]]
        assert json.loads(trace.read_text())["executed"]


def test_run_args_and_inline_trace(tmp_path, capsys):
    src = _write_source(tmp_path, "params")
    for entry in corpus.info("params").entries:
        args = [1] * checks.arity(entry)
        expected = checks.run(corpus.load("params"), "params", entry, ApiEnvironment())
        assert main(["run", str(src), "--entry", entry, "--args", json.dumps(args), "--trace"]) == 0
        out = _json_out(capsys)
        assert (out["outcome"], out["steps"]) == (expected.outcome, expected.steps)
        assert len(out["executed"]) == expected.steps


def test_run_bad_args(tmp_path, capsys):
    src = _write_source(tmp_path, "gps")
    assert main(["run", str(src), "--entry", GPS_MAIN, "--args", "{"]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"
    assert main(["run", str(src), "--entry", "Lapp/Main;->nope()V"]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "UnknownEntry"


def test_repack_sign_verify(tmp_path, capsys, keystore):
    apk = tmp_path / "in.apk"
    apk.write_bytes(fixture_apk("sms"))
    new_dex = tmp_path / "new.dex"
    new_dex.write_bytes(write_dex(corpus.load("gps")))
    repacked, signed = tmp_path / "re.apk", tmp_path / "signed.apk"
    assert main(["repack", str(apk), "--dex", str(new_dex), "-o", str(repacked)]) == 0
    assert unpack(repacked.read_bytes()).dex == new_dex.read_bytes()
    assert main(["sign", "--keystore", str(keystore), str(repacked), "-o", str(signed)]) == 0
    assert main(["verify", str(signed), "--trust", str(keystore)]) == 0
    assert _json_out(capsys)["status"] == "Verified"
    other = tmp_path / "other.json"
    assert main(["keygen", "-o", str(other), "--seed", "99"]) == 0
    assert main(["verify", str(signed), "--trust", str(other)]) == 1
    assert _json_out(capsys)["status"] == "UntrustedSigner"
    assert main(["verify", str(repacked)]) == 1
    assert _json_out(capsys)["status"] == "Unsigned"


def test_repack_refuses_broken_dex(tmp_path, capsys):
    apk = tmp_path / "in.apk"
    apk.write_bytes(fixture_apk("sms"))
    bad = tmp_path / "bad.dex"
    bad.write_bytes(b"dex\n035\x00" + b"\x00" * 40)
    assert main(["repack", str(apk), "--dex", str(bad), "-o", str(tmp_path / "o.apk")]) == 1
    assert not (tmp_path / "o.apk").exists()
    capsys.readouterr()


def _pipeline(tmp_path, name, keystore, *extra):
    apk = tmp_path / f"{name}.apk"
    apk.write_bytes(fixture_apk(name))
    out_dir = tmp_path / f"out-{name}"
    code = main(["pipeline", str(apk), "--keystore", str(keystore), "--out-dir", str(out_dir), *extra])
    return code, out_dir


@pytest.mark.parametrize("name", corpus.names())
def test_pipeline_exit_code_contract(tmp_path, capsys, keystore, toy_map_file, name):
    ads = ",".join(corpus.info(name).ad_packages) or "com.ads"
    code, out_dir = _pipeline(tmp_path, name, keystore, "--map", str(toy_map_file), "--packages", ads)
    result = json.loads((out_dir / "report.json").read_text())
    assert result["exit_code"] == code
    skipped = result["report"]["n_skipped"]
    assert code == (2 if skipped else 0)
    assert (name == "high_regs") == bool(skipped)
    signed = (out_dir / "out.apk").read_bytes()
    assert verify(signed).status is Status.VERIFIED
    assert [st["outcome"] for st in result["bench"]["stages"]] == ["ok"] * 5
    capsys.readouterr()


def test_pipeline_report_counts(tmp_path, capsys, keystore, toy_map_file):
    code, out_dir = _pipeline(tmp_path, "news_reader", keystore, "--map", str(toy_map_file),
                              "--packages", ",".join(corpus.info("news_reader").ad_packages))
    assert code == 0
    report = json.loads((out_dir / "report.json").read_text())["report"]
    assert report["n_wrapped"] > 0 and report["n_try_neutralized"] > 0


def test_identity_pipeline(tmp_path, keystore):
    code, out_dir = _pipeline(tmp_path, "mixed", keystore, "--no-adremove", "--no-weave")
    assert code == 0
    out = unpack((out_dir / "out.apk").read_bytes()).dex
    assert parse_dex(out) == parse_dex(write_dex(corpus.load("mixed")))


def test_pipeline_copies_policy(tmp_path, keystore):
    policy = tmp_path / "policy.json"
    policy.write_text(json.dumps({"apps": {"gps": ["GPS"]}}))
    code, out_dir = _pipeline(tmp_path, "gps", keystore, "--policy", str(policy))
    assert code == 0
    assert (out_dir / "policy.json").read_text() == policy.read_text()


def test_missing_keystore_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "ks.json"
    code, out_dir = _pipeline(tmp_path, "gps", missing)
    assert code == 1
    diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert str(missing) in diag["message"]
    assert not out_dir.exists()


def test_pipeline_stage_failure(tmp_path, capsys, keystore):
    bad = tmp_path / "bad.apk"
    bad.write_bytes(b"not an archive")
    out_dir = tmp_path / "out"
    assert main(["pipeline", str(bad), "--keystore", str(keystore), "--out-dir", str(out_dir)]) == 1
    diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert (diag["error"], diag["stage"]) == ("BadZip", "parse")
    assert json.loads((out_dir / "report.json").read_text())["exit_code"] == 1
    assert not (out_dir / "out.apk").exists()


def test_pipeline_budget(tmp_path, capsys, keystore):
    code, out_dir = _pipeline(tmp_path, "news_reader", keystore, "--budget-mib", "0.001")
    assert code == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "BudgetExceeded"
    assert main(["pipeline", str(tmp_path / "news_reader.apk"), "--keystore", str(keystore),
                 "--out-dir", str(out_dir), "--budget-mib", "-1"]) == 1


def test_bench_empty_corpus(tmp_path, capsys):
    corpus_dir = tmp_path / "empty"
    corpus_dir.mkdir()
    csv_path = tmp_path / "out.csv"
    assert main(["bench", "--corpus", str(corpus_dir), "--csv", str(csv_path)]) == 0
    assert csv_path.read_text().strip() == "app,dex_size_kib,stage,seconds,outcome"
    assert "fit:" not in capsys.readouterr().out


def test_bench_corpus_and_synthetic(tmp_path, capsys):
    corpus_dir = tmp_path / "apps"
    corpus_dir.mkdir()
    for name in ("gps", "ads", "high_regs"):
        (corpus_dir / f"{name}.apk").write_bytes(fixture_apk(name))
    (corpus_dir / "sms.dex").write_bytes(write_dex(corpus.load("sms")))
    csv_path, summary = tmp_path / "out.csv", tmp_path / "summary.csv"
    assert main(["bench", "--corpus", str(corpus_dir), "--synthetic", "10", "20", "--csv", str(csv_path),
                 "--summary-csv", str(summary), "--budget-mib", "32"]) == 0
    out = capsys.readouterr().out
    assert "fit:" in out
    lines = csv_path.read_text().splitlines()
    apps = {line.split(",")[0] for line in lines[1:]}
    assert apps == {"gps", "ads", "high_regs", "sms", "synthetic-10k-0", "synthetic-20k-0"}
    high = [line.split(",") for line in lines if line.startswith("high_regs,")]
    assert [(row[2], row[4]) for row in high] == [("parse", "ok"), ("instrument", "RegisterPressure")]
    total = [line for line in summary.read_text().splitlines() if line.startswith("total")]
    assert total and total[0].split(",")[1] == "5/6 (83%)"


def test_bench_missing_corpus(tmp_path, capsys):
    assert main(["bench", "--corpus", str(tmp_path / "nope")]) == 1
    assert "no such corpus" in json.loads(capsys.readouterr().err)["message"]


def test_log_level_env(tmp_path, keystore, monkeypatch, caplog):
    monkeypatch.setenv("DEXWEAVER_LOG", "INFO")
    with caplog.at_level(logging.NOTSET):
        _pipeline(tmp_path, "gps", keystore)
    assert any("pipeline" in r.getMessage() for r in caplog.records)
    caplog.clear()
    monkeypatch.setenv("DEXWEAVER_LOG", "ERROR")
    with caplog.at_level(logging.NOTSET):
        _pipeline(tmp_path, "gps", keystore)
    assert not any("pipeline" in r.getMessage() for r in caplog.records)


def test_no_stray_outputs(tmp_path, keystore):
    before = set(os.listdir(tmp_path))
    code, out_dir = _pipeline(tmp_path, "gps", keystore)
    after = set(os.listdir(tmp_path))
    assert after - before == {"gps.apk", out_dir.name}
    assert sorted(os.listdir(out_dir)) == ["out.apk", "report.json"]
