from __future__ import annotations

from dataclasses import dataclass
from typing import Union


@dataclass(frozen=True)
class Bound:
    channel: str
    lo: float
    hi: float


@dataclass(frozen=True)
class RateBound:
    channel: str
    max_abs_slope: float


@dataclass(frozen=True)
class Corr:
    channel_a: str
    channel_b: str
    min_corr: float


@dataclass(frozen=True)
class Not:
    operand: "Expr"


@dataclass(frozen=True)
class And:
    operands: tuple["Expr", ...]


@dataclass(frozen=True)
class Or:
    operands: tuple["Expr", ...]


@dataclass(frozen=True)
class Implies:
    premise: "Expr"
    conclusion: "Expr"


Atom = Union[Bound, RateBound, Corr]
Expr = Union[Bound, RateBound, Corr, Not, And, Or, Implies]


@dataclass(frozen=True)
class Axiom:
    name: str
    expr: Expr


@dataclass(frozen=True)
class KnowledgeBase:
    axioms: tuple[Axiom, ...]
    schema: tuple[str, ...]
    source: str = ""

    def __len__(self) -> int:
        return len(self.axioms)

    def names(self) -> list[str]:
        return [a.name for a in self.axioms]


def atoms(expr: Expr) -> list[Atom]:
    if isinstance(expr, (Bound, RateBound, Corr)):
        return [expr]
    if isinstance(expr, Not):
        return atoms(expr.operand)
    if isinstance(expr, Implies):
        return atoms(expr.premise) + atoms(expr.conclusion)
    out: list[Atom] = []
    for op in expr.operands:
        out.extend(atoms(op))
    return out


def channels_of(expr: Expr) -> list[str]:
    seen: list[str] = []
    for a in atoms(expr):
        for ch in atom_channels(a):
            if ch not in seen:
                seen.append(ch)
    return seen


def atom_channels(atom: Atom) -> tuple[str, ...]:
    if isinstance(atom, Corr):
        return (atom.channel_a, atom.channel_b)
    return (atom.channel,)
