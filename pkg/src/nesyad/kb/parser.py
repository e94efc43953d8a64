"""Recursive-descent parser and printer for the axiom language.

Grammar (``#`` starts a line comment)::

    kb      := axiom*
    axiom   := "axiom" IDENT ":" expr ";"
    expr    := disj ("IMPLIES" expr)?
    disj    := conj ("OR" conj)*
    conj    := factor ("AND" factor)*
    factor  := "NOT" factor | "(" expr ")" | atom
    atom    := ("bound" | "rate_bound" | "corr") "(" args ")"

``IMPLIES`` binds loosest and associates to the right.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .nodes import And, Axiom, Bound, Corr, Expr, Implies, KnowledgeBase, Not, Or, RateBound

KEYWORDS = {"axiom", "AND", "OR", "NOT", "IMPLIES"}
ATOM_NAMES = {"bound", "rate_bound", "corr"}

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<number>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<punct>[():;,])
""", re.VERBOSE)


class KBSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise KBSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "ident":
            tokens.append(Token("keyword" if m.group() in KEYWORDS else "ident", m.group(), line, col))
        elif kind in ("number", "punct"):
            tokens.append(Token(kind, m.group(), line, col))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token], schema: Sequence[str] | None):
        self.tokens = tokens
        self.i = 0
        self.schema = None if schema is None else set(schema)

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        raise KBSyntaxError(msg, tok.line, tok.column)

    def advance(self) -> Token:
        tok = self.tok
        self.i += 1
        return tok

    def expect(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind == "eof":
            self.error(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        return self.advance()

    def kb(self) -> list[Axiom]:
        axioms, names = [], set()
        while self.tok.kind != "eof":
            head = self.tok
            ax = self.axiom()
            if ax.name in names:
                self.error(f"duplicate axiom name {ax.name!r}", head)
            names.add(ax.name)
            axioms.append(ax)
        return axioms

    def axiom(self) -> Axiom:
        self.expect("axiom")
        if self.tok.kind not in ("ident",):
            self.error("expected axiom name")
        name = self.advance().text
        self.expect(":")
        expr = self.expr()
        self.expect(";")
        return Axiom(name, expr)

    def expr(self) -> Expr:
        left = self.disj()
        if self.tok.text == "IMPLIES":
            self.advance()
            return Implies(left, self.expr())
        return left

    def disj(self) -> Expr:
        items = [self.conj()]
        while self.tok.text == "OR":
            self.advance()
            items.append(self.conj())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def conj(self) -> Expr:
        items = [self.factor()]
        while self.tok.text == "AND":
            self.advance()
            items.append(self.factor())
        return items[0] if len(items) == 1 else And(tuple(items))

    def factor(self) -> Expr:
        if self.tok.text == "NOT":
            self.advance()
            return Not(self.factor())
        if self.tok.text == "(":
            self.advance()
            inner = self.expr()
            self.expect(")")
            return inner
        return self.atom()

    def channel(self) -> str:
        tok = self.tok
        if tok.kind != "ident":
            self.error(f"expected channel name, found {tok.text or 'end of input'!r}")
        if self.schema is not None and tok.text not in self.schema:
            self.error(f"unknown channel {tok.text!r}", tok)
        self.advance()
        return tok.text

    def number(self) -> float:
        if self.tok.kind != "number":
            self.error(f"expected number, found {self.tok.text or 'end of input'!r}")
        return float(self.advance().text)

    def atom(self) -> Expr:
        head = self.tok
        if head.kind != "ident" or head.text not in ATOM_NAMES:
            self.error(f"expected atom, NOT or '(', found {head.text or 'end of input'!r}")
        self.advance()
        self.expect("(")
        if head.text == "bound":
            ch = self.channel()
            self.expect(",")
            lo = self.number()
            self.expect(",")
            hi = self.number()
            if not lo < hi:
                self.error(f"bound inversion: lo={lo} must be below hi={hi}", head)
            node: Expr = Bound(ch, lo, hi)
        elif head.text == "rate_bound":
            ch = self.channel()
            self.expect(",")
            slope = self.number()
            if not slope > 0:
                self.error("rate_bound slope must be positive", head)
            node = RateBound(ch, slope)
        else:
            a = self.channel()
            self.expect(",")
            b = self.channel()
            self.expect(",")
            m = self.number()
            if not -1.0 <= m < 1.0:
                self.error("corr threshold must lie in [-1, 1)", head)
            node = Corr(a, b, m)
        self.expect(")")
        return node


def parse(text: str, schema: Sequence[str] | None = None) -> KnowledgeBase:
    """Parse axiom source; channels are checked against ``schema`` when given."""
    axioms = _Parser(tokenize(text), schema).kb()
    return KnowledgeBase(tuple(axioms), tuple(schema or ()), text)


def load(path: str | Path, schema: Sequence[str] | None = None) -> KnowledgeBase:
    return parse(Path(path).read_text(encoding="utf-8"), schema)


def _num(x: float) -> str:
    return repr(float(x))


def format_expr(expr: Expr) -> str:
    if isinstance(expr, Bound):
        return f"bound({expr.channel}, {_num(expr.lo)}, {_num(expr.hi)})"
    if isinstance(expr, RateBound):
        return f"rate_bound({expr.channel}, {_num(expr.max_abs_slope)})"
    if isinstance(expr, Corr):
        return f"corr({expr.channel_a}, {expr.channel_b}, {_num(expr.min_corr)})"
    if isinstance(expr, Not):
        return f"NOT {_wrap(expr.operand)}"
    if isinstance(expr, Implies):
        # right operand may be another IMPLIES thanks to right associativity
        right = format_expr(expr.conclusion) if isinstance(expr.conclusion, Implies) \
            else _wrap(expr.conclusion)
        return f"{_wrap(expr.premise)} IMPLIES {right}"
    sep = " AND " if isinstance(expr, And) else " OR "
    return sep.join(_wrap(op) for op in expr.operands)


def _wrap(expr: Expr) -> str:
    if isinstance(expr, (And, Or, Implies)):
        return f"({format_expr(expr)})"
    return format_expr(expr)


def format_kb(kb: KnowledgeBase) -> str:
    return "".join(f"axiom {a.name}: {format_expr(a.expr)};\n" for a in kb.axioms)
