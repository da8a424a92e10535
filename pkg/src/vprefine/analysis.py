"""Static diagnostics, lint scoring and abstraction masking for DSL programs."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Optional

from . import dsl
from .runtime import BOOL, INPUT_VAR, LIST, NUMBER, PATCH, PRIMITIVES, TEXT, UNKNOWN

SEVERITY = {
    "UNDEFINED_VAR": "error",
    "ARITY_MISMATCH": "error",
    "TYPE_MISMATCH": "error",
    "MISSING_RETURN": "error",
    "SHADOWED_VAR": "warning",
    "NAME_CONFLICT_WITH_PRIMITIVE": "warning",
    "UNREACHABLE_CODE": "warning",
    "UNUSED_VAR": "info",
    "LOOP_VAR_LEAK": "info",
}
PENALTY = {"error": Decimal("2.0"), "warning": Decimal("0.5"), "info": Decimal("0.1")}


@dataclass(frozen=True)
class Diagnostic:
    code: str
    line: int
    message: str

    @property
    def severity(self) -> str:
        return SEVERITY[self.code]

    def to_dict(self) -> dict:
        return {"code": self.code, "severity": self.severity, "line": self.line, "message": self.message}


@dataclass
class _State:
    defined: set  # definitely assigned on every path
    maybe: set  # assigned on some path
    types: dict
    leaked: set = field(default_factory=set)  # loop variables whose loop has ended
    origins: dict = field(default_factory=dict)  # name -> lines of the bindings that may reach here

    def copy(self) -> "_State":
        return _State(set(self.defined), set(self.maybe), dict(self.types), set(self.leaked), dict(self.origins))


def _join_type(a: Optional[str], b: Optional[str]) -> str:
    if a is None:
        return b or UNKNOWN
    if b is None:
        return a
    return a if a == b else UNKNOWN


def _join_types(a: dict, b: dict) -> dict:
    return {k: _join_type(a.get(k), b.get(k)) for k in set(a) | set(b)}


def _join_origins(a: dict, b: dict) -> dict:
    return {k: a.get(k, frozenset()) | b.get(k, frozenset()) for k in set(a) | set(b)}


def _merge(a: _State, b: _State) -> _State:
    return _State(
        a.defined & b.defined,
        a.maybe | b.maybe,
        _join_types(a.types, b.types),
        a.leaked | b.leaked,
        _join_origins(a.origins, b.origins),
    )


class _Analyzer:
    def __init__(self):
        self.diags: set[Diagnostic] = set()
        self.reads: set[str] = set()
        self.first_assign: dict[str, int] = {}
        self.quiet = 0

    def report(self, code: str, line: int, message: str) -> None:
        if not self.quiet:
            self.diags.add(Diagnostic(code, line, message))

    def block(self, stmts: tuple, state: _State) -> tuple[_State, bool]:
        """Analyze a block; returns the exit state and whether every path returns."""
        for i, s in enumerate(stmts):
            if isinstance(s, (dsl.StepComment, dsl.PlainComment)):
                continue
            state, terminated = self.stmt(s, state)
            if terminated:
                rest = [r for r in stmts[i + 1 :] if not isinstance(r, (dsl.StepComment, dsl.PlainComment))]
                if rest:
                    self.report("UNREACHABLE_CODE", rest[0].span.line, "statement is unreachable after return")
                return state, True
        return state, False

    def stmt(self, s, state: _State) -> tuple[_State, bool]:
        line = s.span.line
        if isinstance(s, dsl.Assign):
            t = self.expr(s.value, state, line)
            self.bind(s.target, line, state)
            if s.target == INPUT_VAR:
                self.report("SHADOWED_VAR", line, f"assignment shadows the input variable {INPUT_VAR!r}")
            state.defined.add(s.target)
            state.maybe.add(s.target)
            state.types[s.target] = t
            state.origins[s.target] = frozenset({line})
            state.leaked.discard(s.target)
            if not self.quiet:
                self.first_assign.setdefault(s.target, line)
            return state, False
        if isinstance(s, dsl.Return):
            self.expr(s.value, state, line)
            return state, True
        if isinstance(s, dsl.If):
            t = self.expr(s.cond, state, line)
            if t not in (BOOL, UNKNOWN):
                self.report("TYPE_MISMATCH", line, f"condition must be Bool, got {t}")
            then_state, then_ret = self.block(s.body, state.copy())
            if s.orelse is not None:
                else_state, else_ret = self.block(s.orelse, state.copy())
            else:
                else_state, else_ret = state.copy(), False
            if then_ret and else_ret:
                return _merge(then_state, else_state), True
            if then_ret:
                return else_state, False
            if else_ret:
                return then_state, False
            return _merge(then_state, else_state), False
        if isinstance(s, dsl.For):
            t = self.expr(s.iterable, state, line)
            if t not in (LIST, UNKNOWN):
                self.report("TYPE_MISMATCH", line, f"cannot iterate over {t}")
            # re-entering the same loop (e.g. an inner loop on the next outer pass) is not shadowing
            if s.var in state.maybe and state.origins.get(s.var, frozenset()) - {line}:
                self.report("SHADOWED_VAR", line, f"loop variable {s.var!r} shadows an existing variable")
            self.bind(s.var, line, state)
            entry = state.copy()
            entry.defined.add(s.var)
            entry.maybe.add(s.var)
            entry.types[s.var] = UNKNOWN
            entry.leaked.discard(s.var)
            entry.origins[s.var] = frozenset({line})
            # settle loop-carried types before reporting anything
            self.quiet += 1
            try:
                for _ in range(4):
                    out, _ret = self.block(s.body, entry.copy())
                    joined = _join_types(entry.types, out.types)
                    joined[s.var] = UNKNOWN
                    if joined == entry.types:
                        break
                    entry.types = joined
                    entry.maybe |= out.maybe
                    entry.origins = _join_origins(entry.origins, out.origins)
                    entry.origins[s.var] = frozenset({line})
            finally:
                self.quiet -= 1
            out, _ret = self.block(s.body, entry.copy())
            after = _State(
                set(state.defined),
                state.maybe | out.maybe | {s.var},
                _join_types(state.types, out.types),
                state.leaked | out.leaked | {s.var},
                {**_join_origins(state.origins, out.origins), s.var: state.origins.get(s.var, frozenset()) | {line}},
            )
            return after, False
        return state, False

    def bind(self, name: str, line: int, state: _State) -> None:
        if name in PRIMITIVES:
            self.report(
                "NAME_CONFLICT_WITH_PRIMITIVE", line, f"variable {name!r} has the same name as a primitive"
            )

    def expr(self, node, state: _State, line: int) -> str:
        if isinstance(node, dsl.StrLit):
            return TEXT
        if isinstance(node, dsl.NumLit):
            return NUMBER
        if isinstance(node, dsl.BoolLit):
            return BOOL
        if isinstance(node, dsl.Pad):
            return UNKNOWN
        if isinstance(node, dsl.Var):
            name = node.name
            if not self.quiet:
                self.reads.add(name)
            if name not in state.defined:
                if name in state.maybe:
                    self.report("UNDEFINED_VAR", line, f"variable {name!r} may be undefined here")
                else:
                    self.report("UNDEFINED_VAR", line, f"undefined variable {name!r}")
            if name in state.leaked:
                self.report("LOOP_VAR_LEAK", line, f"loop variable {name!r} used after its loop")
            return state.types.get(name, UNKNOWN)
        if isinstance(node, dsl.Call):
            arg_types = [self.expr(a, state, line) for a in node.args]
            sig = PRIMITIVES.get(node.callee)
            if sig is None:
                self.report("UNDEFINED_VAR", line, f"undefined function {node.callee!r}")
                return UNKNOWN
            if len(arg_types) != len(sig.params):
                self.report(
                    "ARITY_MISMATCH",
                    line,
                    f"{node.callee} expects {len(sig.params)} arguments, got {len(arg_types)}",
                )
                return sig.returns
            for i, (want, got) in enumerate(zip(sig.params, arg_types)):
                if UNKNOWN not in (want, got) and want != got:
                    self.report(
                        "TYPE_MISMATCH", line, f"argument {i + 1} of {node.callee} must be {want}, got {got}"
                    )
            return sig.returns
        if isinstance(node, dsl.Index):
            target = self.expr(node.target, state, line)
            index = self.expr(node.index, state, line)
            if target not in (LIST, UNKNOWN):
                self.report("TYPE_MISMATCH", line, f"cannot index {target}")
            if index not in (NUMBER, UNKNOWN):
                self.report("TYPE_MISMATCH", line, f"index must be Number, got {index}")
            return UNKNOWN
        if isinstance(node, dsl.Unary):
            t = self.expr(node.operand, state, line)
            want = BOOL if node.op == "not" else NUMBER
            if t not in (want, UNKNOWN):
                self.report("TYPE_MISMATCH", line, f"'{node.op}' expects {want}, got {t}")
            return want
        if isinstance(node, dsl.Binary):
            return self.binary(node, state, line)
        return UNKNOWN

    def binary(self, node: dsl.Binary, state: _State, line: int) -> str:
        lt = self.expr(node.left, state, line)
        rt = self.expr(node.right, state, line)
        op = node.op
        known = UNKNOWN not in (lt, rt)
        if op in ("==", "!="):
            return BOOL
        if op in ("and", "or"):
            if known and (lt != BOOL or rt != BOOL):
                self.report("TYPE_MISMATCH", line, f"'{op}' expects Bool operands, got {lt} and {rt}")
            return BOOL
        if op in dsl.COMPARISON_OPS:
            if known and (lt != rt or lt not in (NUMBER, TEXT)):
                self.report("TYPE_MISMATCH", line, f"cannot compare {lt} {op} {rt}")
            return BOOL
        if op == "+":
            if known:
                if lt == rt and lt in (NUMBER, TEXT):
                    return lt
                self.report("TYPE_MISMATCH", line, f"unsupported operand types for +: {lt} and {rt}")
                return UNKNOWN
            return UNKNOWN
        if known and (lt != NUMBER or rt != NUMBER):
            self.report("TYPE_MISMATCH", line, f"unsupported operand types for {op}: {lt} and {rt}")
        return NUMBER


def analyze(ast: dsl.ProgramAst) -> list[Diagnostic]:
    """All diagnostics for ``ast``, ordered by (line, code)."""
    a = _Analyzer()
    state = _State({INPUT_VAR}, {INPUT_VAR}, {INPUT_VAR: PATCH})
    _, returned = a.block(ast.statements, state)
    if not returned:
        stmts = [s for s in ast.statements if s.span is not None]
        line = stmts[-1].span.line if stmts else 1
        a.report("MISSING_RETURN", line, "program may end without returning a value")
    for name, line in a.first_assign.items():
        if name not in a.reads:
            a.report("UNUSED_VAR", line, f"variable {name!r} is assigned but never used")
    return sorted(a.diags, key=lambda d: (d.line, d.code, d.message))


def count_by_severity(diags: list[Diagnostic]) -> dict[str, int]:
    counts = {"error": 0, "warning": 0, "info": 0}
    for d in diags:
        counts[d.severity] += 1
    return counts


def has_errors(diags: list[Diagnostic]) -> bool:
    return any(d.severity == "error" for d in diags)


def lint_score(ast: dsl.ProgramAst, diags: Optional[list[Diagnostic]] = None) -> float:
    """Quality score on a 0-10 scale: 10 minus 2.0/0.5/0.1 per error/warning/info."""
    if diags is None:
        diags = analyze(ast)
    total = sum((PENALTY[d.severity] for d in diags), Decimal(0))
    return float(max(Decimal(0), Decimal(10) - total))


# -- abstraction masking ----------------------------------------------------


@dataclass(frozen=True)
class AbstractCode:
    text: str
    skeleton: tuple


class _Masker:
    def __init__(self, mask_callees: bool):
        self.mask_callees = mask_callees

    def expr(self, node, in_cond: bool = False):
        if isinstance(node, (dsl.Var, dsl.StrLit, dsl.NumLit, dsl.BoolLit, dsl.Pad)):
            return dsl.Pad()
        if isinstance(node, dsl.Call):
            callee = dsl.PAD if self.mask_callees else node.callee
            return dsl.Call(callee, tuple(self.expr(a) for a in node.args))
        if isinstance(node, dsl.Index):
            return dsl.Index(self.expr(node.target), self.expr(node.index))
        if isinstance(node, dsl.Unary):
            return dsl.Unary(node.op, self.expr(node.operand, in_cond))
        if isinstance(node, dsl.Binary):
            if in_cond and node.op in dsl.COMPARISON_OPS:
                return dsl.Binary(node.op, self.operand(node.left), self.operand(node.right))
            return dsl.Binary(node.op, self.expr(node.left, in_cond), self.expr(node.right, in_cond))
        raise TypeError(f"not an expression: {node!r}")

    def operand(self, node):
        # a comparison operand inside a condition collapses to <pad> unless it is a call
        if isinstance(node, dsl.Call):
            return self.expr(node)
        return dsl.Pad()

    def block(self, stmts: tuple) -> tuple:
        out = []
        for s in stmts:
            if isinstance(s, dsl.Assign):
                out.append(dsl.Assign(dsl.PAD, self.expr(s.value)))
            elif isinstance(s, dsl.Return):
                out.append(dsl.Return(self.expr(s.value)))
            elif isinstance(s, dsl.If):
                orelse = None if s.orelse is None else self.block(s.orelse)
                out.append(dsl.If(self.expr(s.cond, in_cond=True), self.block(s.body), orelse))
            elif isinstance(s, dsl.For):
                out.append(dsl.For(dsl.PAD, self.expr(s.iterable), self.block(s.body)))
        return tuple(out)


def abstract_code(ast: dsl.ProgramAst, *, mask_callees: bool = False) -> AbstractCode:
    """Mask identifiers, literals and condition operands with ``<pad>``; drop comments."""
    masked = dsl.ProgramAst(_Masker(mask_callees).block(ast.statements))
    return AbstractCode(dsl.canonical_text(masked), tuple(dsl.skeleton(masked)))
