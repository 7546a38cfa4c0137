"""A small interpreter for the supported subset, used as a behavioural oracle.

Methods defined in the DEX with a body are interpreted.  Everything else is
the "API": calls are logged in ``call_trace`` and answered from scripted
bindings.  The woven-in monitor and stub classes are special: the monitor
asks the policy hook, and stub calls go to ``stub_trace`` and return the
fake default for their return type.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

from .dex.code import to_symbolic
from .dex.model import ACC_STATIC, CATCH_ALL, DexFile, parse_signature
from .errors import ArityMismatch, ConfigError, UnknownEntry, UnsupportedOpcode
from .passes.weave import ACCEPT_NAME, MONITOR_CLASS, STUB_CLASS

DEFAULT_STEP_BUDGET = 100_000
DEFAULT_MAX_DEPTH = 512

NULL_POINTER = "Ljava/lang/NullPointerException;"
RUNTIME_EXCEPTION = "Ljava/lang/RuntimeException;"
STACK_OVERFLOW = "Ljava/lang/StackOverflowError;"


@dataclass
class Obj:
    """A reference value: an exception instance or an opaque handle."""

    type: str
    id: int


@dataclass(frozen=True)
class Throw:
    type: str


@dataclass(frozen=True)
class NewObject:
    type: str


def fake_default(ret: str):
    """What a denied call returns: 0 for integral and boolean, null for references."""
    if ret == "V":
        return None
    if ret[0] in "L[":
        return None
    return 0


def _binding(raw):
    if isinstance(raw, (Throw, NewObject)):
        return raw
    if isinstance(raw, dict):
        if set(raw) == {"throw"}:
            return Throw(raw["throw"])
        if set(raw) == {"object"}:
            return NewObject(raw["object"])
        raise ConfigError(f"binding must be a value, {{'throw': T}} or {{'object': T}}, got {raw!r}")
    if isinstance(raw, bool):
        return int(raw)
    if raw is None or isinstance(raw, (int, str)):
        return raw
    raise ConfigError(f"unsupported binding value {raw!r}")


@dataclass
class ApiEnvironment:
    bindings: dict = field(default_factory=dict)
    policy_hook: Callable[[str], bool] | None = None
    monitor_class: str = MONITOR_CLASS
    stub_class: str = STUB_CLASS
    call_trace: list = field(default_factory=list)
    stub_trace: list = field(default_factory=list)
    decisions: list = field(default_factory=list)

    def __post_init__(self):
        self.bindings = {sig: _binding(v) for sig, v in self.bindings.items()}

    @classmethod
    def from_json(cls, data) -> ApiEnvironment:
        if not isinstance(data, dict):
            raise ConfigError("environment must be a JSON object")
        bindings = data.get("bindings", {})
        if not isinstance(bindings, dict):
            raise ConfigError('"bindings" must map signatures to values')
        return cls(dict(bindings))

    def with_policy(self, policy, pmap, app: str) -> ApiEnvironment:
        """Answer policyAccepts from ``policy`` for application ``app``."""
        from .policy import policy_accepts

        def hook(key: str) -> bool:
            return policy_accepts(policy, pmap, app, key).allowed

        return ApiEnvironment(dict(self.bindings), hook, self.monitor_class, self.stub_class)

    def fresh(self) -> ApiEnvironment:
        return ApiEnvironment(dict(self.bindings), self.policy_hook, self.monitor_class, self.stub_class)


@dataclass
class ExecResult:
    outcome: str          # "return", "uncaught" or "budget_exceeded"
    value: object = None  # returned value, or the uncaught exception's type
    steps: int = 0
    call_trace: list = field(default_factory=list)
    stub_trace: list = field(default_factory=list)
    executed: list = field(default_factory=list)  # (method signature, address) per step

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "value": _jsonable(self.value),
            "steps": self.steps,
            "call_trace": [[sig, [_jsonable(a) for a in args]] for sig, args in self.call_trace],
            "stub_trace": [[key, [_jsonable(a) for a in args]] for key, args in self.stub_trace],
        }


def _jsonable(v):
    if isinstance(v, Obj):
        return {"object": v.type, "id": v.id}
    return v


def _is_null(v) -> bool:
    # const/4 vX, 0 is how bytecode spells null
    return v is None or (type(v) is int and v == 0)


class _Thrown(Exception):
    def __init__(self, obj: Obj):
        super().__init__(obj.type)
        self.obj = obj


@dataclass
class _Method:
    sig: str
    insns: list
    addrs: list
    tries: list
    registers: int
    ins: int


@dataclass
class _Frame:
    method: _Method
    regs: list
    pc: int = 0
    result: object = None


class Interpreter:
    def __init__(self, dex: DexFile, env: ApiEnvironment, step_budget: int = DEFAULT_STEP_BUDGET,
                 max_depth: int = DEFAULT_MAX_DEPTH):
        self.dex = dex
        self.env = env
        self.step_budget = step_budget
        self.max_depth = max_depth
        self.defined = {}
        self.static = {}
        for cd in dex.class_defs:
            for em in cd.methods:
                sig = dex.method_signature(em.method_idx)
                self.defined[sig] = em
                self.static[sig] = bool(em.access_flags & ACC_STATIC)
        self.classes = {dex.class_descriptor(cd) for cd in dex.class_defs}
        self._methods = {}
        self._next_id = 0
        self.executed = []

    def _method(self, sig: str) -> _Method:
        m = self._methods.get(sig)
        if m is None:
            code = self.defined[sig].code
            insns, tries = to_symbolic(code)
            m = _Method(sig, insns, code.addresses(), tries, code.registers_size, code.ins_size)
            self._methods[sig] = m
        return m

    def new_object(self, type_desc: str) -> Obj:
        self._next_id += 1
        return Obj(type_desc, self._next_id)

    # calls that leave the interpreted program

    def _call_out(self, sig: str, args: list):
        cls, name, params, ret = parse_signature(sig)
        env = self.env
        if cls == env.monitor_class and name == ACCEPT_NAME:
            key = args[0]
            allowed = bool(env.policy_hook(key)) if env.policy_hook else False
            env.decisions.append((key, allowed))
            return 1 if allowed else 0
        if cls == env.stub_class:
            env.stub_trace.append((args[0] if args else None, tuple(args[1:])))
            return fake_default(ret)
        if name == "<init>":
            receiver = args[0]
            if receiver is not None and receiver.type in self.classes:
                # the class is ours but lacks this constructor
                receiver.type = RUNTIME_EXCEPTION
            return None
        env.call_trace.append((sig, tuple(args)))
        bound = env.bindings.get(sig, _UNBOUND)
        if bound is _UNBOUND:
            return fake_default(ret)
        if isinstance(bound, Throw):
            raise _Thrown(self.new_object(bound.type))
        if isinstance(bound, NewObject):
            return self.new_object(bound.type)
        return bound

    # main loop

    def run(self, entry: str, args) -> ExecResult:
        em = self.defined.get(entry)
        if em is None or em.code is None:
            raise UnknownEntry(f"no method body for {entry}")
        _, _, params, _ = parse_signature(entry)
        expected = len(params) + (0 if self.static[entry] else 1)
        if len(args) != expected:
            raise ArityMismatch(f"{entry} takes {expected} argument(s), got {len(args)}")
        slots = list(args[:expected - len(params)])
        for p, a in zip(params, args[expected - len(params):]):
            slots.append(a)
            if p in ("J", "D"):
                slots.append(0)
        frames = [self._enter(entry, slots)]
        steps = 0
        while True:
            frame = frames[-1]
            if steps >= self.step_budget:
                return self._result("budget_exceeded", None, steps)
            steps += 1
            m = frame.method
            insn = m.insns[frame.pc]
            self.executed.append((m.sig, m.addrs[frame.pc]))
            try:
                done = self._step(frames, frame, insn)
            except _Thrown as exc:
                if not self._unwind(frames, exc.obj):
                    return self._result("uncaught", exc.obj.type, steps)
                continue
            if done is not None:
                return self._result("return", done[0], steps)

    def _result(self, outcome, value, steps) -> ExecResult:
        env = self.env
        return ExecResult(outcome, value, steps, list(env.call_trace), list(env.stub_trace),
                          list(self.executed))

    def _enter(self, sig: str, slots: list) -> _Frame:
        m = self._method(sig)
        regs = [0] * m.registers
        regs[m.registers - m.ins:] = slots
        return _Frame(m, regs)

    def _unwind(self, frames: list, obj: Obj) -> bool:
        while frames:
            frame = frames[-1]
            for t in frame.method.tries:
                if t.start <= frame.pc < t.end:
                    for h in t.handlers:
                        if h.type_idx == CATCH_ALL or self.dex.type_desc(h.type_idx) == obj.type:
                            frame.pc = h.addr
                            return True
                    break
            frames.pop()
        return False

    def _step(self, frames, frame: _Frame, insn):
        op = insn.op
        r = frame.regs
        dex = self.dex
        nxt = frame.pc + 1
        if op == "nop":
            pass
        elif op in ("const/4", "const/16"):
            r[insn.regs[0]] = insn.literal
        elif op == "const-string":
            r[insn.regs[0]] = dex.strings[insn.index]
        elif op in ("move", "move-object"):
            r[insn.regs[0]] = r[insn.regs[1]]
        elif op in ("move-result", "move-result-object"):
            r[insn.regs[0]] = frame.result
        elif op == "new-instance":
            r[insn.regs[0]] = self.new_object(dex.type_desc(insn.index))
        elif op in ("invoke-static", "invoke-virtual", "invoke-direct"):
            sig = dex.method_signature(insn.index)
            args = [r[x] for x in insn.regs]
            if op != "invoke-static" and _is_null(args[0]):
                raise _Thrown(self.new_object(NULL_POINTER))
            em = self.defined.get(sig)
            if em is not None and em.code is not None:
                if len(frames) >= self.max_depth:
                    raise _Thrown(self.new_object(STACK_OVERFLOW))
                frame.result = None
                frames.append(self._enter(sig, args))
                return None
            frame.result = self._call_out(sig, args)
        elif op == "throw":
            value = r[insn.regs[0]]
            raise _Thrown(self.new_object(NULL_POINTER) if _is_null(value) else value)
        elif op in ("goto", "goto/16", "goto/32"):
            nxt = insn.target
        elif op == "if-eqz":
            v = r[insn.regs[0]]
            if v is None or v == 0:
                nxt = insn.target
        elif op in ("return", "return-object", "return-void"):
            value = None if op == "return-void" else r[insn.regs[0]]
            frames.pop()
            if not frames:
                return (value,)
            caller = frames[-1]
            caller.result = value
            caller.pc += 1
            return None
        else:
            raise UnsupportedOpcode(f"{frame.method.sig}: {op} is outside the supported subset")
        frame.pc = nxt
        return None


_UNBOUND = object()


def execute(dex: DexFile, entry: str, args=(), env: ApiEnvironment | None = None,
            step_budget: int = DEFAULT_STEP_BUDGET) -> ExecResult:
    """Run ``entry`` to completion, an uncaught exception, or the step budget."""
    env = env if env is not None else ApiEnvironment()
    return Interpreter(dex, env, step_budget).run(entry, list(args))


def load_env(path) -> ApiEnvironment:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return ApiEnvironment.from_json(data)
