"""Shared helpers for behavioural comparisons over the fixture corpus."""

from dexweaver import corpus
from dexweaver.dex.code import to_symbolic
from dexweaver.interp import ApiEnvironment, execute, fake_default
from dexweaver.passes import AdConfig, WeaveConfig, neutralize_ads, weave_permissions
from dexweaver.dex.model import parse_signature
from dexweaver.policy import Policy

APP = "app"
INJECTED_THROW = 3  # new-instance, invoke-direct <init>, throw


def env_for(name):
    return ApiEnvironment(dict(corpus.info(name).bindings))


def entries(name):
    return corpus.info(name).entries


def arity(sig):
    _, _, params, _ = parse_signature(sig)
    return len(params)


def run(dex, name, entry, env=None):
    return execute(dex, entry, [1] * arity(entry), env if env is not None else env_for(name))


def weaved(name, pmap):
    return weave_permissions(corpus.load(name), WeaveConfig(pmap))


def run_with_policy(dex, name, entry, pmap, policy):
    env = env_for(name).with_policy(policy, pmap, APP)
    return run(dex, name, entry, env), env


def allow_all(pmap):
    return Policy.allow_all(APP, pmap)


def deny_all():
    return Policy({APP: frozenset()})


def protected(trace, pmap):
    return [(sig, args) for sig, args in trace if sig in pmap]


def neutralized(name):
    info = corpus.info(name)
    return neutralize_ads(corpus.load(name), AdConfig(info.ad_packages))


def try_blocks(dex, packages):
    """(signature, start address, original body addresses, handler address) per try block.

    Each try range of a neutralized method starts with the injected throw
    block; everything after it inside the range is original body.
    """
    from dexweaver.dex.scan import in_packages

    blocks = []
    for cd in dex.class_defs:
        if not in_packages(dex.package_name(cd), packages):
            continue
        for em in cd.methods:
            if em.code is None or not em.code.tries:
                continue
            sig = dex.method_signature(em.method_idx)
            addrs = em.code.addresses()
            insns, tries = to_symbolic(em.code)
            for t in tries:
                assert insns[t.start].op == "new-instance"
                assert insns[t.start + 2].op == "throw"
                body = frozenset(addrs[i] for i in range(t.start + INJECTED_THROW, t.end))
                blocks.append((sig, addrs[t.start], body, addrs[t.handlers[0].addr]))
    return blocks


def fake_for(sig):
    return fake_default(parse_signature(sig)[3])
