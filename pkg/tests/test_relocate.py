from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dexweaver import assemble, disassemble
from dexweaver.dex import Instruction, parse_dex, write_dex
from dexweaver.dex.code import to_symbolic
from dexweaver.errors import MalformedCode, RegisterPressure, UnsupportedRegion
from dexweaver.interp import ApiEnvironment, Throw, execute
from dexweaver.passes import Insertion, relocate, splice

HEADER = ".class public LT;\n.super Ljava/lang/Object;\n"
NOP = Instruction("nop")


def only_code(dex):
    return next(em.code for _, em in dex.iter_methods() if em.code)


def with_code(dex, code):
    cd = dex.class_defs[0]
    em = cd.direct_methods[0]
    return replace(dex, class_defs=[replace(cd, direct_methods=[replace(em, code=code)])])


SPEC_METHOD = HEADER + """\
.method public static f(I)I
    .registers 4
    if-eqz v3, :zero
    const/4 v0, 1
    return v0
:zero
    const/4 v0, 0
    return v0
.end method
.end class
"""


def test_spec_example():
    dex = assemble(SPEC_METHOD)
    code = only_code(dex)
    before = code.instructions[0].target
    grown = relocate(code, 3, [NOP, NOP, NOP], extra_regs=1)
    assert grown.registers_size == 5
    assert grown.ins_size == 1
    branch = grown.instructions[0]
    assert branch.op == "if-eqz" and branch.regs == (4,)
    assert branch.target == before + 3
    text = disassemble(with_code(dex, grown))
    assert "if-eqz v4, :L0" in text
    for arg in (0, 5):
        assert execute(with_code(dex, grown), "LT;->f(I)I", [arg]).value == execute(dex, "LT;->f(I)I", [arg]).value


def test_identity():
    code = only_code(assemble(SPEC_METHOD))
    assert relocate(code, 1, [], extra_regs=0) is code
    assert splice(code, [], 0) is code


def test_redirect_enters_the_block():
    code = only_code(assemble(SPEC_METHOD))
    plain = relocate(code, 3, [NOP], extra_regs=0)
    entered = relocate(code, 3, [NOP], extra_regs=0, redirect=True)
    assert plain.instructions[0].target == entered.instructions[0].target + 1


def test_parameter_renumbering_overflows_four_bit_field():
    src = HEADER + """\
.method public static g(I)I
    .registers 16
    const/4 v0, 1
    move v0, v15
    return v15
.end method
.end class
"""
    code = only_code(assemble(src))
    with pytest.raises(RegisterPressure):
        relocate(code, 0, [], extra_regs=1)


def test_payload_refused():
    dex = assemble(SPEC_METHOD)
    code = only_code(dex)
    payload = Instruction("nop", payload=(0x0300, 1, 1, 0, 0))
    bad = replace(code, instructions=list(code.instructions) + [payload])
    with pytest.raises(UnsupportedRegion):
        relocate(bad, 0, [NOP], extra_regs=0)


def test_bad_insertion_point():
    code = only_code(assemble(SPEC_METHOD))
    with pytest.raises(MalformedCode):
        relocate(code, 99, [NOP], extra_regs=0)


def test_goto_is_widened():
    src = HEADER + """\
.method public static h()I
    .registers 1
    const/4 v0, 3
    goto :end
    const/4 v0, 1
:end
    return v0
.end method
.end class
"""
    dex = assemble(src)
    code = only_code(dex)
    assert code.instructions[1].op == "goto"
    grown = relocate(code, 2, [NOP] * 200, extra_regs=0)
    assert grown.instructions[1].op == "goto/16"
    huge = relocate(code, 2, [NOP] * 40000, extra_regs=0)
    assert huge.instructions[1].op == "goto/32"
    for c in (grown, huge):
        out = with_code(dex, c)
        assert parse_dex(write_dex(out)) == out
        assert execute(out, "LT;->h()I").value == 3


def test_try_ranges_follow_affinity():
    src = HEADER + """\
.method public static t()I
    .registers 1
:s
    const/4 v0, 1
    const/4 v0, 2
:e
    return v0
:h
    return v0
    .catchall :s :e :h
.end method
.end class
"""
    code = only_code(assemble(src))
    blocks = [Insertion(0, (NOP,), affinity="next"), Insertion(2, (NOP,), affinity="prev"),
              Insertion(3, (NOP,), affinity="next")]
    _, tries = to_symbolic(splice(code, blocks))
    # the leading and trailing blocks join the try; the block before the handler does not
    assert (tries[0].start, tries[0].end) == (0, 4)
    assert tries[0].handlers[0].addr == 6


def test_outs_grow_with_injected_invoke():
    code = only_code(assemble(SPEC_METHOD))
    call = Instruction("invoke-static", (0, 1, 2), index=0)
    assert relocate(code, 0, [call], extra_regs=0).outs_size == 3


# -- property: random programs keep their behaviour ------------------------------

def _program(draw):
    n = draw(st.integers(2, 10))
    lines = []
    for k in range(n):
        kind = draw(st.sampled_from(["const", "branch", "goto", "log", "ping"]))
        reg = draw(st.integers(0, 2))
        if kind == "const":
            lines.append(f"    const/4 v{reg}, {draw(st.integers(-8, 7))}")
        elif kind == "branch":
            lines.append(f"    if-eqz v{draw(st.integers(0, 3))}, :l{draw(st.integers(k + 1, n))}")
        elif kind == "goto":
            lines.append(f"    goto :l{draw(st.integers(k + 1, n))}")
        elif kind == "log":
            lines.append(f"    invoke-static {{v{draw(st.integers(0, 3))}}}, Lapi/Log;->i(I)V")
        else:
            lines.append("    invoke-static {}, Lapi/Net;->ping()I")
            lines.append(f"    move-result v{reg}")
        lines[-1] = f":l{k}\n" + lines[-1] if not lines[-1].startswith(":") else lines[-1]
    body = "\n".join(lines)
    return HEADER + f"""\
.method public static p(I)I
    .registers 4
    const/4 v0, 0
    const/4 v1, 0
    const/4 v2, 0
:s
{body}
:l{n}
    invoke-static {{v3}}, Lapi/Log;->i(I)V
:e
    return v0
:h
    const/4 v0, 7
    return v0
    .try :s :e catch Ljava/io/IOException; :h
.end method
.end class
"""


@st.composite
def programs(draw):
    return _program(draw)


@settings(max_examples=150, deadline=None)
@given(programs(), st.data(), st.integers(0, 3), st.integers(-3, 3), st.booleans())
def test_insertions_preserve_behaviour(src, data, extra, arg, throws):
    dex = assemble(src)
    code = only_code(dex)
    n = len(code.instructions)
    blocks = data.draw(st.lists(
        st.builds(Insertion, st.integers(0, n), st.integers(0, 40).map(lambda k: (NOP,) * k),
                  st.booleans(), st.sampled_from(["next", "prev"])),
        max_size=5))
    env = {"Lapi/Net;->ping()I": Throw("Ljava/io/IOException;") if throws else 1}
    grown = with_code(dex, splice(code, blocks, extra))
    assert parse_dex(write_dex(grown)) == grown
    a = execute(dex, "LT;->p(I)I", [arg], ApiEnvironment(dict(env)))
    b = execute(grown, "LT;->p(I)I", [arg], ApiEnvironment(dict(env)))
    assert (a.outcome, a.value, a.call_trace) == (b.outcome, b.value, b.call_trace)
