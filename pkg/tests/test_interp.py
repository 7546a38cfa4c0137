import json

import pytest

import checks
from dexweaver import assemble, corpus
from dexweaver.errors import ArityMismatch, ConfigError, UnknownEntry, UnsupportedOpcode
from dexweaver.dex import CodeItem, Instruction
from dexweaver.interp import ApiEnvironment, NewObject, Obj, Throw, execute, fake_default, load_env

GPS = "Lapi/Gps;->getLocation()I"
HEADER = ".class public LT;\n.super Ljava/lang/Object;\n"


def test_gps_main_hand_simulated():
    r = execute(corpus.load("gps"), "Lapp/Main;->main()I", [], ApiEnvironment({GPS: 42}))
    assert (r.outcome, r.value) == ("return", 42)
    assert [sig for sig, _ in r.call_trace] == [GPS]
    assert r.steps == 5  # new-instance, invoke, move-result, if-eqz, return


def test_gps_woven_allow_and_deny(toy_map):
    dex = corpus.load("gps")
    woven, _ = checks.weaved("gps", toy_map)
    entry = "Lapp/Main;->main()I"
    original = checks.run(dex, "gps", entry)
    allowed, _ = checks.run_with_policy(woven, "gps", entry, toy_map, checks.allow_all(toy_map))
    assert (allowed.outcome, allowed.value, allowed.call_trace) == (original.outcome, original.value, original.call_trace)
    denied, env = checks.run_with_policy(woven, "gps", entry, toy_map, checks.deny_all())
    assert (denied.outcome, denied.value) == ("return", 0)
    assert denied.call_trace == []
    assert [key for key, _ in denied.stub_trace] == [GPS]
    assert env.decisions == [(GPS, False)]


def test_monitor_without_policy_denies(toy_map):
    woven, _ = checks.weaved("gps", toy_map)
    r = execute(woven, "Lapp/Main;->main()I", [], ApiEnvironment({GPS: 42}))
    assert r.value == 0 and r.call_trace == []


@pytest.mark.parametrize("name", corpus.names())
def test_determinism(name):
    for entry in checks.entries(name):
        a = checks.run(corpus.load(name), name, entry)
        b = checks.run(corpus.load(name), name, entry)
        assert a == b


def test_exceptions_fixture():
    dex = corpus.load("exceptions")
    caught = checks.run(dex, "exceptions", "Lapp/Main;->main()I")
    assert caught.outcome == "return"
    wrong = checks.run(dex, "exceptions", "Lapp/Main;->wrongHandler()I")
    assert (wrong.outcome, wrong.value) == ("uncaught", "Ljava/lang/IllegalStateException;")


def _method(body, decl="f()I", registers=2):
    return assemble(HEADER + f".method public static {decl}\n    .registers {registers}\n{body}\n.end method\n.end class\n")


def test_first_matching_handler_wins():
    dex = _method("""\
:s
    invoke-static {}, Lapi/Net;->ping()I
:e
    const/4 v0, 0
    return v0
:h1
    const/4 v0, 1
    return v0
:h2
    const/4 v0, 2
    return v0
    .try :s :e catch Ljava/io/IOException; :h1
    .try :s :e catch Ljava/lang/RuntimeException; :h2""")
    def ping(t):
        return execute(dex, "LT;->f()I", [], ApiEnvironment({"Lapi/Net;->ping()I": Throw(t)}))
    assert ping("Ljava/io/IOException;").value == 1
    assert ping("Ljava/lang/RuntimeException;").value == 2
    # exact-type matching: a subclass is not caught by its parent's handler
    assert ping("Ljava/io/FileNotFoundException;").outcome == "uncaught"


def test_catch_all_catches_anything():
    dex = _method("""\
:s
    invoke-static {}, Lapi/Net;->ping()I
:e
    const/4 v0, 0
    return v0
:h
    const/4 v0, 3
    return v0
    .catchall :s :e :h""")
    r = execute(dex, "LT;->f()I", [], ApiEnvironment({"Lapi/Net;->ping()I": Throw("Lx/Anything;")}))
    assert r.value == 3


def test_null_receiver_and_null_throw():
    npe = "Ljava/lang/NullPointerException;"
    dex = _method("    const/4 v0, 0\n    invoke-virtual {v0}, Lapi/Gps;->getLocation()I\n    return v0")
    assert execute(dex, "LT;->f()I").value == npe
    dex = _method("    const/4 v0, 0\n    throw v0")
    assert execute(dex, "LT;->f()I").value == npe


def test_deep_recursion_overflows():
    dex = _method("    invoke-static {}, LT;->f()I\n    move-result v0\n    return v0")
    r = execute(dex, "LT;->f()I")
    assert (r.outcome, r.value) == ("uncaught", "Ljava/lang/StackOverflowError;")


def test_step_budget():
    dex = _method(":top\n    goto :top")
    r = execute(dex, "LT;->f()I", step_budget=500)
    assert (r.outcome, r.steps) == ("budget_exceeded", 500)
    assert execute(corpus.load("branches"), "Lapp/Main;->forever()V").outcome == "budget_exceeded"


def test_bindings():
    dex = _method("""\
    invoke-static {}, Lapi/A;->obj()Lapi/B;
    move-result-object v0
    return-object v0""", decl="f()Lapi/B;")
    r = execute(dex, "LT;->f()Lapi/B;", [], ApiEnvironment({"Lapi/A;->obj()Lapi/B;": NewObject("Lapi/B;")}))
    assert isinstance(r.value, Obj) and r.value.type == "Lapi/B;"
    assert execute(dex, "LT;->f()Lapi/B;").value is None  # unbound: fake default
    with pytest.raises(ConfigError):
        ApiEnvironment({"x": {"weird": 1}})


def test_constructor_of_unknown_class_is_silent():
    dex = _method("""\
    new-instance v0, Ljava/io/IOException;
    invoke-direct {v0}, Ljava/io/IOException;-><init>()V
    throw v0""")
    r = execute(dex, "LT;->f()I")
    assert (r.outcome, r.value, r.call_trace) == ("uncaught", "Ljava/io/IOException;", [])


def test_own_class_without_constructor_becomes_runtime_exception():
    dex = _method("""\
    new-instance v0, LT;
    invoke-direct {v0}, LT;-><init>()V
    throw v0""")
    assert execute(dex, "LT;->f()I").value == "Ljava/lang/RuntimeException;"


def test_entry_errors():
    dex = corpus.load("params")
    with pytest.raises(UnknownEntry):
        execute(dex, "Lapp/Main;->nothing()V")
    with pytest.raises(ArityMismatch):
        execute(dex, "Lapp/Main;->main()I", [1])


def test_unsupported_opcode():
    dex = _method("    return-void", decl="f()V")
    cd = dex.class_defs[0]
    em = cd.direct_methods[0]
    from dataclasses import replace

    code = CodeItem(2, 0, 0, [Instruction("add-int/2addr", (0, 1)), Instruction("return-void")])
    dex = replace(dex, class_defs=[replace(cd, direct_methods=[replace(em, code=code)])])
    with pytest.raises(UnsupportedOpcode):
        execute(dex, "LT;->f()V")


def test_trace_separation(toy_map):
    woven, _ = checks.weaved("sms", toy_map)
    for policy in (checks.allow_all(toy_map), checks.deny_all()):
        r, _ = checks.run_with_policy(woven, "sms", "Lapp/Main;->main()I", toy_map, policy)
        called = {sig for sig, _ in r.call_trace if sig in toy_map}
        stubbed = {key for key, _ in r.stub_trace}
        assert not called & stubbed
        assert len(called | stubbed) == 1


def test_fake_defaults():
    assert fake_default("I") == 0 and fake_default("Z") == 0 and fake_default("J") == 0
    assert fake_default("Ljava/lang/String;") is None and fake_default("[I") is None
    assert fake_default("V") is None


def test_env_file(tmp_path):
    path = tmp_path / "env.json"
    path.write_text(json.dumps({"bindings": {GPS: 7, "Lapi/Net;->ping()I": {"throw": "Ljava/io/IOException;"}}}))
    env = load_env(path)
    assert env.bindings[GPS] == 7
    assert env.bindings["Lapi/Net;->ping()I"] == Throw("Ljava/io/IOException;")
    path.write_text("[]")
    with pytest.raises(ConfigError):
        load_env(path)


def test_result_serializes():
    r = checks.run(corpus.load("camera"), "camera", "Lapp/Main;->main()I")
    json.dumps(r.to_dict())
