"""Visual-program DSL: AST types, indentation-aware parser and canonical printer.

Programs are small Python-like scripts::

    # step 1: find the muffins
    ms = find(image, "muffin")
    # step 2: count them
    return count(ms)

Blocks are delimited by 4-space indentation. The grammar is deliberately closed
(no functions, no while loops, no attribute access) so that the interpreter is
total up to its step limit and masking is purely syntactic. See docs/grammar.md
for the EBNF.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Iterator, Optional, Union

INDENT = 4
PAD = "<pad>"
KEYWORDS = frozenset(
    {"if", "else", "for", "in", "return", "and", "or", "not", "True", "False"}
)
COMPARISON_OPS = ("==", "!=", "<", "<=", ">", ">=")
BINARY_OPS = ("+", "-", "*", "/") + COMPARISON_OPS + ("and", "or")

ORIGINS = ("generated", "refined", "retrieved", "user")


@dataclass(frozen=True)
class SourceProgram:
    text: str
    origin: str = field(default="user", compare=False)  # provenance only; equality is by text


@dataclass(frozen=True)
class Span:
    """Location of a node: 1-based line, 0-based half-open column range."""

    line: int
    col_start: int
    col_end: int


def _span() -> Optional[Span]:
    return field(default=None, compare=False, repr=False)


# -- expressions ------------------------------------------------------------


@dataclass(frozen=True)
class StrLit:
    value: str
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class NumLit:
    value: Decimal
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class BoolLit:
    value: bool
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Var:
    name: str
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Pad:
    """The ``<pad>`` placeholder; only legal in abstract code."""

    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Call:
    callee: str
    args: tuple
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Index:
    target: "Expr"
    index: "Expr"
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Unary:
    op: str  # "not" or "-"
    operand: "Expr"
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"
    span: Optional[Span] = _span()


Expr = Union[StrLit, NumLit, BoolLit, Var, Pad, Call, Index, Unary, Binary]


# -- statements -------------------------------------------------------------


@dataclass(frozen=True)
class Assign:
    target: str
    value: Expr
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class If:
    cond: Expr
    body: tuple
    orelse: Optional[tuple] = None
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class For:
    var: str
    iterable: Expr
    body: tuple
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class Return:
    value: Expr
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class StepComment:
    step_id: int
    text: str
    span: Optional[Span] = _span()


@dataclass(frozen=True)
class PlainComment:
    text: str
    span: Optional[Span] = _span()


Stmt = Union[Assign, If, For, Return, StepComment, PlainComment]


@dataclass(frozen=True)
class ProgramAst:
    statements: tuple


# -- errors -----------------------------------------------------------------


@dataclass(frozen=True)
class ParseError:
    line: int
    message: str
    expected: Optional[str] = None

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


class ParseFailure(ValueError):
    """Raised by :func:`parse`; ``errors`` holds every error found (at least one)."""

    def __init__(self, errors: list[ParseError]):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors))


class _LineError(Exception):
    def __init__(self, message: str, expected: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.expected = expected


# -- lexer ------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
     (?P<ws>[ ]+)
    |(?P<comment>\#.*)
    |(?P<pad><pad>)
    |(?P<number>\d+(?:\.\d+)?)
    |(?P<string>"(?:[^"\\\n]|\\.)*"|'(?:[^'\\\n]|\\.)*')
    |(?P<name>[A-Za-z_][A-Za-z0-9_]*)
    |(?P<op>==|!=|<=|>=|[-+*/<>=()\[\],:])
    """,
    re.VERBOSE,
)
_ESCAPES = {"\\": "\\", '"': '"', "'": "'", "n": "\n", "t": "\t"}
_STEP_RE = re.compile(r"#\s*step\s+(\d+)\s*:\s?(.*)$", re.IGNORECASE)


@dataclass(frozen=True)
class Token:
    kind: str  # name, keyword, number, string, op, pad, comment
    text: str
    col: int

    @property
    def end(self) -> int:
        return self.col + len(self.text)


def tokenize_line(text: str, *, abstract: bool = False) -> list[Token]:
    """Split one physical line (without indentation handling) into tokens."""
    tokens: list[Token] = []
    pos = 0
    while pos < len(text):
        ch = text[pos]
        if ch == "\t":
            raise _LineError("tabs are not allowed")
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            if ch in "\"'":
                raise _LineError("unterminated string", expected=f"closing {ch}")
            raise _LineError(f"unknown token {ch!r}")
        kind = m.lastgroup
        tok = m.group()
        if kind == "pad" and not abstract:
            raise _LineError(f"unknown token {tok!r}")
        if kind == "name" and tok in KEYWORDS:
            kind = "keyword"
        if kind != "ws":
            tokens.append(Token(kind, tok, pos))
        pos = m.end()
    return tokens


def _unquote(tok: str) -> str:
    body = tok[1:-1]
    out = []
    i = 0
    while i < len(body):
        c = body[i]
        if c == "\\":
            nxt = body[i + 1]
            if nxt not in _ESCAPES:
                raise _LineError(f"invalid escape '\\{nxt}' in string")
            out.append(_ESCAPES[nxt])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


# -- expression parser ------------------------------------------------------


class _ExprParser:
    def __init__(self, tokens: list[Token], line: int):
        self.toks = tokens
        self.pos = 0
        self.line = line

    def peek(self) -> Optional[Token]:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind in ("op", "keyword") and tok.text == text

    def take(self) -> Token:
        tok = self.peek()
        if tok is None:
            raise _LineError("unexpected end of line", expected="expression")
        self.pos += 1
        return tok

    def expect(self, text: str) -> Token:
        tok = self.peek()
        if tok is None or tok.text != text or tok.kind not in ("op", "keyword"):
            found = "end of line" if tok is None else repr(tok.text)
            raise _LineError(f"expected {text!r}, found {found}", expected=repr(text))
        self.pos += 1
        return tok

    def span(self, start: int, end: int) -> Span:
        return Span(self.line, start, end)

    @staticmethod
    def _start(node) -> int:
        return node.span.col_start

    @staticmethod
    def _end(node) -> int:
        return node.span.col_end

    def expr(self) -> Expr:
        return self.or_expr()

    def _binary_chain(self, ops: tuple, sub) -> Expr:
        left = sub()
        while True:
            tok = self.peek()
            if tok is None or tok.kind not in ("op", "keyword") or tok.text not in ops:
                return left
            self.pos += 1
            right = sub()
            left = Binary(
                tok.text, left, right, self.span(self._start(left), self._end(right))
            )

    def or_expr(self) -> Expr:
        return self._binary_chain(("or",), self.and_expr)

    def and_expr(self) -> Expr:
        return self._binary_chain(("and",), self.not_expr)

    def not_expr(self) -> Expr:
        if self.at("not"):
            tok = self.take()
            operand = self.not_expr()
            return Unary("not", operand, self.span(tok.col, self._end(operand)))
        return self.comparison()

    def comparison(self) -> Expr:
        left = self.additive()
        tok = self.peek()
        if tok is not None and tok.kind == "op" and tok.text in COMPARISON_OPS:
            self.pos += 1
            right = self.additive()
            nxt = self.peek()
            if nxt is not None and nxt.kind == "op" and nxt.text in COMPARISON_OPS:
                raise _LineError("chained comparisons are not supported")
            return Binary(
                tok.text, left, right, self.span(self._start(left), self._end(right))
            )
        return left

    def additive(self) -> Expr:
        return self._binary_chain(("+", "-"), self.term)

    def term(self) -> Expr:
        return self._binary_chain(("*", "/"), self.unary)

    def unary(self) -> Expr:
        if self.at("-"):
            tok = self.take()
            operand = self.unary()
            return Unary("-", operand, self.span(tok.col, self._end(operand)))
        return self.postfix()

    def postfix(self) -> Expr:
        node = self.atom()
        while self.at("["):
            self.take()
            index = self.expr()
            close = self.expect("]")
            node = Index(node, index, self.span(self._start(node), close.end))
        return node

    def atom(self) -> Expr:
        tok = self.take()
        sp = self.span(tok.col, tok.end)
        if tok.kind == "number":
            return NumLit(Decimal(tok.text), sp)
        if tok.kind == "string":
            return StrLit(_unquote(tok.text), sp)
        if tok.kind == "keyword" and tok.text in ("True", "False"):
            return BoolLit(tok.text == "True", sp)
        if tok.kind in ("name", "pad"):
            if self.at("("):
                return self.call(tok)
            return Pad(sp) if tok.kind == "pad" else Var(tok.text, sp)
        if tok.kind == "op" and tok.text == "(":
            inner = self.expr()
            close = self.expect(")")
            return dataclasses.replace(inner, span=self.span(tok.col, close.end))
        raise _LineError(f"unexpected {tok.text!r}", expected="expression")

    def call(self, name: Token) -> Call:
        self.expect("(")
        args = []
        if not self.at(")"):
            args.append(self.expr())
            while self.at(","):
                self.take()
                args.append(self.expr())
        close = self.expect(")")
        return Call(name.text, tuple(args), self.span(name.col, close.end))

    def finish(self) -> None:
        tok = self.peek()
        if tok is not None:
            raise _LineError(f"unexpected {tok.text!r}", expected="end of line")


def parse_expression(text: str, *, abstract: bool = False, line: int = 1) -> Expr:
    """Parse a single expression; raises :class:`ParseFailure`."""
    try:
        toks = [t for t in tokenize_line(text, abstract=abstract) if t.kind != "comment"]
        p = _ExprParser(toks, line)
        node = p.expr()
        p.finish()
        return node
    except _LineError as e:
        raise ParseFailure([ParseError(line, e.message, e.expected)]) from None


# -- statement parser -------------------------------------------------------


@dataclass
class _Line:
    number: int
    indent: int
    raw: str
    tokens: list


class _Unrecoverable(Exception):
    pass


class _Parser:
    def __init__(self, text: str, abstract: bool):
        self.abstract = abstract
        self.errors: list[ParseError] = []
        self.lines: list[_Line] = []
        self.last_step = 0
        self.text = text
        self.pos = 0

    def fail(self, line: int, message: str, expected: Optional[str] = None) -> None:
        self.errors.append(ParseError(line, message, expected))
        raise _Unrecoverable()

    def split(self) -> None:
        for number, raw in enumerate(self.text.split("\n"), start=1):
            raw = raw.rstrip("\r")
            if not raw.strip(" "):
                if "\t" in raw:
                    self.fail(number, "tabs are not allowed")
                continue
            stripped = raw.lstrip(" ")
            indent = len(raw) - len(stripped)
            if stripped.startswith("\t"):
                self.fail(number, "tab in indentation", expected="spaces")
            if indent % INDENT:
                self.fail(
                    number,
                    f"bad indentation: {indent} spaces is not a multiple of {INDENT}",
                )
            try:
                tokens = tokenize_line(raw, abstract=self.abstract)
            except _LineError as e:
                self.errors.append(ParseError(number, e.message, e.expected))
                tokens = None
            self.lines.append(_Line(number, indent, raw, tokens))

    def peek(self) -> Optional[_Line]:
        return self.lines[self.pos] if self.pos < len(self.lines) else None

    def program(self) -> tuple:
        first = self.peek()
        if first is not None and first.indent != 0:
            self.fail(first.number, "unexpected indent")
        stmts = self.block(0)
        leftover = self.peek()
        if leftover is not None:
            self.fail(leftover.number, "unexpected indent")
        return stmts

    def block(self, indent: int) -> tuple:
        stmts = []
        while True:
            ln = self.peek()
            if ln is None or ln.indent < indent:
                break
            if ln.indent > indent:
                self.fail(ln.number, "unexpected indent")
            stmt = self.statement(ln, indent)
            if stmt is not None:
                stmts.append(stmt)
        return tuple(stmts)

    def body(self, header: _Line, indent: int) -> tuple:
        ln = self.peek()
        if ln is None or ln.indent <= indent:
            line = header.number + 1 if ln is None else ln.number
            self.fail(line, "expected indented block", expected="indented block")
        if ln.indent != indent + INDENT:
            self.fail(ln.number, "unexpected indent")
        stmts = self.block(indent + INDENT)
        if not any(not isinstance(s, (StepComment, PlainComment)) for s in stmts) and not self.errors:
            self.fail(ln.number, "block contains no statements", expected="statement")
        return stmts

    def statement(self, ln: _Line, indent: int):
        self.pos += 1
        toks = ln.tokens
        if toks is None:  # lexing already failed; skip the line
            return None
        if toks[0].kind == "comment":
            return self.comment(ln, toks[0])
        if toks[-1].kind == "comment":
            toks = toks[:-1]
        head = toks[0]
        try:
            if head.kind == "keyword" and head.text == "if":
                cond = self.header(ln, toks[1:], "if")
                body = self.body(ln, indent)
                orelse = None
                nxt = self.peek()
                if nxt is not None and nxt.indent == indent and self._is_else(nxt):
                    self.pos += 1
                    self.else_header(nxt)
                    orelse = self.body(nxt, indent)
                return If(cond, body, orelse, self._stmt_span(ln, toks))
            if head.kind == "keyword" and head.text == "else":
                self.fail(ln.number, "'else' without matching 'if'")
            if head.kind == "keyword" and head.text == "for":
                var, iterable = self.for_header(ln, toks)
                body = self.body(ln, indent)
                return For(var, iterable, body, self._stmt_span(ln, toks))
            if head.kind == "keyword" and head.text == "return":
                p = _ExprParser(toks[1:], ln.number)
                value = p.expr()
                p.finish()
                return Return(value, self._stmt_span(ln, toks))
            if (
                len(toks) >= 2
                and head.kind in ("name", "pad")
                and toks[1].kind == "op"
                and toks[1].text == "="
            ):
                p = _ExprParser(toks[2:], ln.number)
                value = p.expr()
                p.finish()
                return Assign(head.text, value, self._stmt_span(ln, toks))
            raise _LineError(
                "expected a statement (assignment, if, for or return)",
                expected="statement",
            )
        except _LineError as e:
            self.errors.append(ParseError(ln.number, e.message, e.expected))
            if head.kind == "keyword" and head.text in ("if", "for"):
                raise _Unrecoverable() from None
            return None

    @staticmethod
    def _is_else(ln: _Line) -> bool:
        return bool(ln.tokens) and ln.tokens[0].kind == "keyword" and ln.tokens[0].text == "else"

    def _stmt_span(self, ln: _Line, toks: list) -> Span:
        return Span(ln.number, toks[0].col, toks[-1].end)

    def header(self, ln: _Line, toks: list, what: str) -> Expr:
        if not toks or toks[-1].text != ":":
            raise _LineError(f"expected ':' at end of {what} header", expected="':'")
        p = _ExprParser(toks[:-1], ln.number)
        cond = p.expr()
        p.finish()
        return cond

    def else_header(self, ln: _Line) -> None:
        toks = [t for t in ln.tokens if t.kind != "comment"]
        if len(toks) != 2 or toks[1].text != ":":
            self.fail(ln.number, "expected 'else:'", expected="':'")

    def for_header(self, ln: _Line, toks: list):
        if len(toks) < 4 or toks[1].kind not in ("name", "pad"):
            raise _LineError("expected loop variable after 'for'", expected="name")
        if toks[2].text != "in":
            raise _LineError("expected 'in' in for header", expected="'in'")
        iterable = self.header(ln, toks[3:], "for")
        return toks[1].text, iterable

    def comment(self, ln: _Line, tok: Token):
        m = _STEP_RE.match(tok.text)
        span = Span(ln.number, tok.col, tok.end)
        if m:
            step_id = int(m.group(1))
            if step_id < 1:
                self.errors.append(ParseError(ln.number, "step ids must be positive"))
                return None
            if step_id <= self.last_step:
                self.errors.append(
                    ParseError(
                        ln.number,
                        f"step comments must strictly increase (step {step_id} after step {self.last_step})",
                    )
                )
                return None
            self.last_step = step_id
            return StepComment(step_id, m.group(2).strip(), span)
        return PlainComment(tok.text[1:].strip(), span)


def parse(src: Union[SourceProgram, str], *, abstract: bool = False) -> ProgramAst:
    """Parse program text; raises :class:`ParseFailure` listing every error found.

    With ``abstract=True`` the ``<pad>`` placeholder is accepted wherever an
    identifier or literal may appear.
    """
    text = src.text if isinstance(src, SourceProgram) else src
    parser = _Parser(text, abstract)
    try:
        parser.split()
        stmts = parser.program()
    except _Unrecoverable:
        stmts = ()
    if parser.errors:
        errors = sorted(set(parser.errors), key=lambda e: (e.line, e.message))
        raise ParseFailure(errors)
    return ProgramAst(stmts)


def parse_abstract(text: str) -> ProgramAst:
    return parse(text, abstract=True)


# -- canonical printer ------------------------------------------------------

_PREC = {"or": 1, "and": 2, "not": 3, "cmp": 4, "+": 5, "-": 5, "*": 6, "/": 6}
_UNARY_MINUS = 7
_POSTFIX = 8
_ATOM = 9


def _prec(node: Expr) -> int:
    if isinstance(node, Binary):
        return _PREC["cmp"] if node.op in COMPARISON_OPS else _PREC[node.op]
    if isinstance(node, Unary):
        return _PREC["not"] if node.op == "not" else _UNARY_MINUS
    if isinstance(node, (Index, Call)):
        return _POSTFIX
    return _ATOM


def format_number(value: Decimal) -> str:
    if value == value.to_integral_value():
        return str(int(value))
    return format(value.normalize(), "f")


def quote_string(value: str) -> str:
    body = (
        value.replace("\\", "\\\\")
        .replace('"', '\\"')
        .replace("\n", "\\n")
        .replace("\t", "\\t")
    )
    return f'"{body}"'


def print_expr(node: Expr) -> str:
    def wrap(child: Expr, min_prec: int) -> str:
        s = print_expr(child)
        return f"({s})" if _prec(child) < min_prec else s

    if isinstance(node, StrLit):
        return quote_string(node.value)
    if isinstance(node, NumLit):
        return format_number(node.value)
    if isinstance(node, BoolLit):
        return "True" if node.value else "False"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Pad):
        return PAD
    if isinstance(node, Call):
        return f"{node.callee}({', '.join(print_expr(a) for a in node.args)})"
    if isinstance(node, Index):
        return f"{wrap(node.target, _POSTFIX)}[{print_expr(node.index)}]"
    if isinstance(node, Unary):
        if node.op == "not":
            return f"not {wrap(node.operand, _PREC['not'])}"
        return f"-{wrap(node.operand, _UNARY_MINUS)}"
    if isinstance(node, Binary):
        p = _prec(node)
        if node.op in COMPARISON_OPS:
            return f"{wrap(node.left, p + 1)} {node.op} {wrap(node.right, p + 1)}"
        return f"{wrap(node.left, p)} {node.op} {wrap(node.right, p + 1)}"
    raise TypeError(f"not an expression: {node!r}")


def _print_block(stmts: tuple, depth: int, out: list) -> None:
    pad = " " * (INDENT * depth)
    for s in stmts:
        if isinstance(s, Assign):
            out.append(f"{pad}{s.target} = {print_expr(s.value)}")
        elif isinstance(s, Return):
            out.append(f"{pad}return {print_expr(s.value)}")
        elif isinstance(s, StepComment):
            out.append(f"{pad}# step {s.step_id}: {s.text}".rstrip())
        elif isinstance(s, PlainComment):
            out.append(f"{pad}# {s.text}".rstrip())
        elif isinstance(s, If):
            out.append(f"{pad}if {print_expr(s.cond)}:")
            _print_block(s.body, depth + 1, out)
            if s.orelse is not None:
                out.append(f"{pad}else:")
                _print_block(s.orelse, depth + 1, out)
        elif isinstance(s, For):
            out.append(f"{pad}for {s.var} in {print_expr(s.iterable)}:")
            _print_block(s.body, depth + 1, out)
        else:
            raise TypeError(f"not a statement: {s!r}")


def print_canonical(ast: ProgramAst, origin: str = "user") -> SourceProgram:
    out: list[str] = []
    _print_block(ast.statements, 0, out)
    return SourceProgram("".join(line + "\n" for line in out), origin)


def canonical_text(ast: ProgramAst) -> str:
    return print_canonical(ast).text


# -- traversal helpers ------------------------------------------------------


def iter_statements(stmts) -> Iterator[Stmt]:
    """Pre-order walk over statements, descending into blocks."""
    if isinstance(stmts, ProgramAst):
        stmts = stmts.statements
    for s in stmts:
        yield s
        if isinstance(s, If):
            yield from iter_statements(s.body)
            if s.orelse is not None:
                yield from iter_statements(s.orelse)
        elif isinstance(s, For):
            yield from iter_statements(s.body)


def child_exprs(node) -> tuple:
    if isinstance(node, Call):
        return node.args
    if isinstance(node, Index):
        return (node.target, node.index)
    if isinstance(node, Unary):
        return (node.operand,)
    if isinstance(node, Binary):
        return (node.left, node.right)
    return ()


def iter_exprs(node) -> Iterator[Expr]:
    """Pre-order walk over an expression and its subexpressions."""
    yield node
    for child in child_exprs(node):
        yield from iter_exprs(child)


def statement_exprs(stmt: Stmt) -> tuple:
    if isinstance(stmt, (Assign, Return)):
        return (stmt.value,)
    if isinstance(stmt, If):
        return (stmt.cond,)
    if isinstance(stmt, For):
        return (stmt.iterable,)
    return ()


def skeleton(ast_or_stmts) -> list[str]:
    """Statement-kind tags in pre-order, with ``else``/``end`` block markers.

    Comments are omitted.
    """
    stmts = ast_or_stmts.statements if isinstance(ast_or_stmts, ProgramAst) else ast_or_stmts
    tags: list[str] = []
    for s in stmts:
        if isinstance(s, Assign):
            tags.append("assign")
        elif isinstance(s, Return):
            tags.append("return")
        elif isinstance(s, If):
            tags.append("if")
            tags.extend(skeleton(s.body))
            if s.orelse is not None:
                tags.append("else")
                tags.extend(skeleton(s.orelse))
            tags.append("end")
        elif isinstance(s, For):
            tags.append("for")
            tags.extend(skeleton(s.body))
            tags.append("end")
    return tags


def step_comments(ast: ProgramAst) -> dict[int, str]:
    return {s.step_id: s.text for s in iter_statements(ast) if isinstance(s, StepComment)}
