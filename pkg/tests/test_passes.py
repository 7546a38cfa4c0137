import re

import pytest

import oracles
from dexweaver import corpus, disassemble
from dexweaver.dex import find_protected_invocations, find_try_blocks, parse_dex, write_dex
from dexweaver.dex.code import to_symbolic
from dexweaver.errors import ConfigError
from dexweaver.passes import (
    MONITOR_CLASS, STUB_CLASS, AdConfig, InstrumentationReport, WeaveConfig, neutralize_ads,
    weave_permissions,
)
from dexweaver.passes.adremove import FALLBACK_EXCEPTION, thrown_type
from dexweaver.policy import PermissionMap

NAMES = corpus.names()


def class_texts(dex):
    """Disassembly per class, which is independent of pool index numbering."""
    text = disassemble(dex)
    return {m.group(1): m.group(0) for m in re.finditer(r"\.class [^\n]*?(L[^\s;]+;)\n.*?\.end class\n", text, re.S)}


@pytest.mark.parametrize("name", NAMES)
def test_count_law(name, toy_map):
    woven, report = weave_permissions(corpus.load(name), WeaveConfig(toy_map))
    brute = oracles.count_protected_in_source(corpus.source(name), toy_map)
    assert report.n_wrapped + report.skipped_sites("weave") == brute
    text = disassemble(woven) if report.n_wrapped else ""
    assert text.count("Monitor;->policyAccepts") == report.n_wrapped


def test_gps_weave(toy_map):
    woven, report = weave_permissions(corpus.load("gps"), WeaveConfig(PermissionMap({"Lapi/Gps;->getLocation()I": ["GPS"]})))
    assert report.n_wrapped == 3
    assert disassemble(woven).count("Monitor;->policyAccepts") == 3
    assert woven.find_class(MONITOR_CLASS) is not None
    assert woven.find_class(STUB_CLASS) is not None


def test_move_result_kept_on_both_branches(toy_map):
    woven, _ = weave_permissions(corpus.load("gps"), WeaveConfig(toy_map))
    text = class_texts(woven)["Lapp/Main;"]
    main = text[text.index("main()I"):text.index(".end method")]
    lines = [line.strip() for line in main.splitlines()]
    original = lines.index("invoke-virtual {v0}, Lapi/Gps;->getLocation()I")
    assert lines[original + 1] == "move-result v1"
    stub = next(i for i, line in enumerate(lines) if "Stub;->getLocation" in line)
    assert lines[stub + 1] == "move-result v1"


@pytest.mark.parametrize("name", NAMES)
def test_empty_map_is_identity(name):
    dex = corpus.load(name)
    woven, report = weave_permissions(dex, WeaveConfig(PermissionMap()))
    assert woven == dex
    assert report == InstrumentationReport()


@pytest.mark.parametrize("name", NAMES)
def test_no_ad_packages_is_identity(name):
    dex = corpus.load(name)
    out, report = neutralize_ads(dex, AdConfig(()))
    assert out == dex
    assert report.n_try_neutralized == 0


@pytest.mark.parametrize("name", NAMES)
def test_weave_non_interference(name, toy_map):
    dex = corpus.load(name)
    woven, _ = weave_permissions(dex, WeaveConfig(toy_map))
    touched = {s.class_desc for s in find_protected_invocations(dex, toy_map)}
    before, after = class_texts(dex), class_texts(woven)
    for cls, text in before.items():
        if cls not in touched:
            assert after[cls] == text
    assert set(after) - set(before) <= {MONITOR_CLASS, STUB_CLASS}


@pytest.mark.parametrize("name", NAMES)
def test_adremove_non_interference(name):
    dex = corpus.load(name)
    packages = corpus.info(name).ad_packages or ("com.ads",)
    out, _ = neutralize_ads(dex, AdConfig(packages))
    touched = {dex.class_descriptor(cd) for cd, _, _ in find_try_blocks(dex, packages)}
    before, after = class_texts(dex), class_texts(out)
    assert set(before) == set(after)
    for cls, text in before.items():
        if cls not in touched:
            assert after[cls] == text


def test_adremove_counts():
    expected = {"ads": 2, "catchall": 3, "mixed": 1, "news_reader": 1}
    for name in NAMES:
        info = corpus.info(name)
        _, report = neutralize_ads(corpus.load(name), AdConfig(info.ad_packages or ("com.ads",)))
        assert report.n_try_neutralized == expected.get(name, 0), name


def test_adremove_injects_first_handler_type():
    dex = corpus.load("ads")
    out, report = neutralize_ads(dex, AdConfig(("com.ads",)))
    assert report.n_try_neutralized == 2
    text = class_texts(out)["Lcom/ads/x/AdView;"]
    assert "new-instance v2, Ljava/io/IOException;" in text
    assert f"new-instance v2, {FALLBACK_EXCEPTION}" in text
    assert text.count("throw v2") == 2


def test_catch_all_maps_to_runtime_exception():
    dex = corpus.load("catchall")
    code = next(em.code for cd, em in dex.iter_methods() if em.code and em.code.tries)
    _, tries = to_symbolic(code)
    catch_all = [t for t in tries if len(t.handlers) == 1]
    assert catch_all and all(thrown_type(dex, t.handlers) == "Ljava/lang/RuntimeException;" for t in catch_all)


def test_prefix_matching_is_per_component():
    dex = corpus.load("mixed")
    out, report = neutralize_ads(dex, AdConfig(("com.ads",)))
    assert report.n_try_neutralized == 1
    assert class_texts(out)["Lcom/adsense/Partner;"] == class_texts(dex)["Lcom/adsense/Partner;"]
    _, broader = neutralize_ads(dex, AdConfig(("com",)))
    assert broader.n_try_neutralized == 2


def test_bad_ad_package_rejected():
    with pytest.raises(ConfigError):
        AdConfig(("com..ads",))
    with pytest.raises(ConfigError):
        AdConfig(("Lcom/ads;",))


def test_register_pressure_skips_method(toy_map):
    dex = corpus.load("high_regs")
    woven, report = weave_permissions(dex, WeaveConfig(toy_map))
    assert report.n_wrapped == 1
    assert [(s.reason, s.method) for s in report.skipped] == [("RegisterPressure", "Lapp/Main;->probe(I)I")]
    assert class_texts(woven)["Lapp/Main;"].count("policyAccepts") == 1
    woven.validate()
    # the skipped site's stub is not left behind in the pools
    assert not any("Stub;->getFix" in woven.method_signature(i) for i in range(len(woven.methods)))


def test_existing_monitor_class_is_refused(toy_map):
    woven, _ = weave_permissions(corpus.load("gps"), WeaveConfig(toy_map))
    with pytest.raises(ConfigError):
        weave_permissions(woven, WeaveConfig(toy_map))


def test_custom_monitor_names(toy_map):
    cfg = WeaveConfig(toy_map, monitor_class="Lorg/x/M;", stub_class="Lorg/x/S;")
    woven, report = weave_permissions(corpus.load("sms"), cfg)
    assert report.n_wrapped == 1
    assert woven.find_class("Lorg/x/M;") is not None
    with pytest.raises(ConfigError):
        WeaveConfig(toy_map, monitor_class="Lorg/x/M;", stub_class="Lorg/x/M;")
    with pytest.raises(ConfigError):
        WeaveConfig(toy_map, monitor_class="not a descriptor")


def test_both_passes_compose(toy_map):
    dex = corpus.load("mixed")
    out, ads = neutralize_ads(dex, AdConfig(("com.ads",)))
    out, weave = weave_permissions(out, WeaveConfig(toy_map))
    assert (ads.n_try_neutralized, weave.n_wrapped) == (1, 2)
    assert parse_dex(write_dex(out)) == out
    merged = ads.merge(weave)
    assert merged.to_dict()["n_wrapped"] == 2
    assert merged.to_dict()["n_try_neutralized"] == 1


@pytest.mark.parametrize("name", ["exceptions", "mixed", "catchall"])
def test_input_model_is_not_mutated(name, toy_map):
    dex = corpus.load(name)
    out, _ = neutralize_ads(dex, AdConfig(("com.ads",)))
    weave_permissions(out, WeaveConfig(toy_map))
    assert dex == corpus.load(name)
