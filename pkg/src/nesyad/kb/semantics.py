"""Differentiable fuzzy satisfaction under the product t-norm.

Atoms map a window batch ``(B, C, L)`` to per-window degrees in [0, 1]:

* ``bound(c, lo, hi)``: ``clamp(1 - d / m, 0, 1)`` where ``d`` is the worst
  excursion outside ``[lo, hi]`` and ``m = 0.1 (hi - lo)``.
* ``rate_bound(c, s)``: the same rule applied to first differences against
  ``[-s, s]``.
* ``corr(a, b, r)``: ``clamp((rho - r) / (1 - r), 0, 1)`` with Pearson rho.

Connectives: ``a AND b = ab``, ``a OR b = a + b - ab``, ``NOT a = 1 - a``,
``a IMPLIES b = 1 - a + ab``. The implicit universal quantifier is the batch
mean (``"min"`` is available), and the knowledge-base degree is the product
of axiom degrees.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .nodes import And, Atom, Bound, Corr, Expr, Implies, KnowledgeBase, Not, RateBound
from .parser import format_expr

MARGIN_FRACTION = 0.1
CORR_EPS = 1e-12


class SchemaError(ValueError):
    pass


def _channel_index(kb: KnowledgeBase, name: str) -> int:
    return kb.schema.index(name)


def _excursion_degree(values: Tensor, lo: float, hi: float) -> Tensor:
    margin = MARGIN_FRACTION * (hi - lo)
    below = ad.reduce_max(lo - values, axis=1, keepdims=True)
    above = ad.reduce_max(values - hi, axis=1, keepdims=True)
    worst = ad.reduce_max(ad.concat([below, above], axis=1), axis=1)
    return ad.relu(1.0 - ad.relu(worst) / margin)


def pearson(a: Tensor, b: Tensor) -> Tensor:
    da = a - ad.mean(a, axis=1, keepdims=True)
    db = b - ad.mean(b, axis=1, keepdims=True)
    cov = ad.reduce_sum(da * db, axis=1)
    var = ad.reduce_sum(da * da, axis=1) * ad.reduce_sum(db * db, axis=1)
    return cov / ad.sqrt(var + CORR_EPS)


def atom_degree(kb: KnowledgeBase, atom: Atom, x: Tensor) -> Tensor:
    if isinstance(atom, Bound):
        v = x[:, _channel_index(kb, atom.channel), :]
        return _excursion_degree(v, atom.lo, atom.hi)
    if isinstance(atom, RateBound):
        v = x[:, _channel_index(kb, atom.channel), :]
        slope = v[:, 1:] - v[:, :-1]
        s = atom.max_abs_slope
        return _excursion_degree(slope, -s, s)
    if isinstance(atom, Corr):
        a = x[:, _channel_index(kb, atom.channel_a), :]
        b = x[:, _channel_index(kb, atom.channel_b), :]
        rho = pearson(a, b)
        return ad.clip((rho - atom.min_corr) / (1.0 - atom.min_corr), 0.0, 1.0)
    raise TypeError(f"not an atom: {atom!r}")


def t_and(a, b):
    return a * b


def t_or(a, b):
    return a + b - a * b


def t_not(a):
    return 1.0 - a


def t_implies(a, b):
    return 1.0 - a + a * b


def expr_degree(kb: KnowledgeBase, expr: Expr, x: Tensor, cache: dict | None = None) -> Tensor:
    cache = {} if cache is None else cache
    if isinstance(expr, (Bound, RateBound, Corr)):
        if expr not in cache:
            cache[expr] = atom_degree(kb, expr, x)
        return cache[expr]
    if isinstance(expr, Not):
        return t_not(expr_degree(kb, expr.operand, x, cache))
    if isinstance(expr, Implies):
        return t_implies(expr_degree(kb, expr.premise, x, cache),
                         expr_degree(kb, expr.conclusion, x, cache))
    parts = [expr_degree(kb, op, x, cache) for op in expr.operands]
    combine = t_and if isinstance(expr, And) else t_or
    out = parts[0]
    for p in parts[1:]:
        out = combine(out, p)
    return out


def _as_batch(kb: KnowledgeBase, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[0] == 0:
        raise SchemaError(f"expected a nonempty (batch, channels, length) array, got {x.shape}")
    if x.shape[1] != len(kb.schema):
        raise SchemaError(f"batch has {x.shape[1]} channels, knowledge base schema has {len(kb.schema)}")
    return x


def axiom_degrees(kb: KnowledgeBase, x) -> dict[str, Tensor]:
    """Per-window degree of every axiom, each of shape ``(B,)``."""
    x = _as_batch(kb, x)
    cache: dict = {}
    return {ax.name: expr_degree(kb, ax.expr, x, cache) for ax in kb.axioms}


def quantify(degrees: Tensor, quantifier: str = "mean") -> Tensor:
    if quantifier == "mean":
        return ad.mean(degrees)
    if quantifier == "min":
        return -ad.reduce_max(-degrees)
    raise ValueError(f"unknown quantifier {quantifier!r}")


def total_satisfaction(kb: KnowledgeBase, x, quantifier: str = "mean") -> Tensor:
    total = Tensor(1.0)
    for deg in axiom_degrees(kb, x).values():
        total = total * quantify(deg, quantifier)
    return total


def semantic_loss(kb: KnowledgeBase, x, lam: float, quantifier: str = "mean") -> Tensor:
    if lam < 0:
        raise ValueError("semantic loss weight must be non-negative")
    return lam * (1.0 - total_satisfaction(kb, x, quantifier))


# reporting --------------------------------------------------------------------

@dataclass
class AtomFinding:
    atom: str
    channels: tuple[str, ...]
    degree: float
    observed: float
    acceptable: tuple[float, float]
    quantity: str


@dataclass
class Violation:
    axiom: str
    degree: float
    channels: tuple[str, ...]
    findings: list[AtomFinding] = field(default_factory=list)


@dataclass
class SatisfactionReport:
    axiom_degrees: dict[str, float]
    total: float
    violated: list[Violation]


def _frozen(values: np.ndarray, tol: float = 1e-12) -> bool:
    diffs = np.abs(np.diff(values))
    scale = tol * max(1.0, float(np.max(np.abs(values))))
    return np.mean(diffs <= scale) >= 0.5


def atom_culprits(atom: Atom, window: np.ndarray, kb: KnowledgeBase) -> tuple[str, ...]:
    if not isinstance(atom, Corr):
        return (atom.channel,)
    a = window[_channel_index(kb, atom.channel_a)]
    b = window[_channel_index(kb, atom.channel_b)]
    fa, fb = _frozen(a), _frozen(b)
    # a frozen sensor explains a lost correlation on its own
    if fa != fb:
        return (atom.channel_a,) if fa else (atom.channel_b,)
    return (atom.channel_a, atom.channel_b)


def _finding(atom: Atom, degree: float, window: np.ndarray, kb: KnowledgeBase) -> AtomFinding:
    text = format_expr(atom)
    culprits = atom_culprits(atom, window, kb)
    if isinstance(atom, Bound):
        v = window[_channel_index(kb, atom.channel)]
        lo_gap, hi_gap = atom.lo - v.min(), v.max() - atom.hi
        observed = float(v.min() if lo_gap > hi_gap else v.max())
        return AtomFinding(text, culprits, degree, observed, (atom.lo, atom.hi), "value")
    if isinstance(atom, RateBound):
        v = window[_channel_index(kb, atom.channel)]
        slope = np.diff(v)
        observed = float(slope[np.argmax(np.abs(slope))])
        s = atom.max_abs_slope
        return AtomFinding(text, culprits, degree, observed, (-s, s), "slope")
    rho = pearson(Tensor(window[None, _channel_index(kb, atom.channel_a)]),
                  Tensor(window[None, _channel_index(kb, atom.channel_b)])).data[0]
    return AtomFinding(text, culprits, degree, float(rho), (atom.min_corr, 1.0), "correlation")


def _blame(expr: Expr, want: bool, degrees: dict, out: list) -> None:
    """Collect atoms pulling ``expr`` away from the wanted truth value."""
    if isinstance(expr, (Bound, RateBound, Corr)):
        d = degrees[expr]
        if (want and d < 1.0) or (not want and d > 0.0):
            if expr not in out:
                out.append(expr)
        return
    if isinstance(expr, Not):
        _blame(expr.operand, not want, degrees, out)
    elif isinstance(expr, Implies):
        _blame(expr.premise, not want, degrees, out)
        _blame(expr.conclusion, want, degrees, out)
    else:
        for op in expr.operands:
            _blame(op, want, degrees, out)


def explain_window(kb: KnowledgeBase, window: np.ndarray, cutoff: float = 0.5) -> list[Violation]:
    """Axioms with degree below ``cutoff`` on one raw-unit window ``(C, L)``."""
    if not 0.0 < cutoff <= 1.0:
        raise ValueError("cutoff must lie in (0, 1]")
    window = np.asarray(window, dtype=np.float64)
    x = _as_batch(kb, window)
    cache: dict = {}
    report = []
    for ax in kb.axioms:
        degree = float(expr_degree(kb, ax.expr, x, cache).data[0])
        if degree >= cutoff:
            continue
        atom_deg = {a: float(t.data[0]) for a, t in cache.items()}
        blamed: list = []
        _blame(ax.expr, True, atom_deg, blamed)
        findings = [_finding(a, atom_deg[a], window, kb) for a in blamed]
        chans: list[str] = []
        for f in findings:
            chans.extend(c for c in f.channels if c not in chans)
        report.append(Violation(ax.name, degree, tuple(chans), findings))
    return report


def satisfaction(kb: KnowledgeBase, x, cutoff: float = 0.5,
                 quantifier: str = "mean") -> SatisfactionReport:
    batch = _as_batch(kb, x)
    per_window = axiom_degrees(kb, batch)
    degrees = {name: float(quantify(d, quantifier).data) for name, d in per_window.items()}
    total = float(np.prod(list(degrees.values()))) if degrees else 1.0
    violated = []
    arr = batch.data
    for ax in kb.axioms:
        if degrees[ax.name] >= cutoff:
            continue
        chans: list[str] = []
        findings: list[AtomFinding] = []
        for i in np.flatnonzero(per_window[ax.name].data < cutoff):
            for v in explain_window(kb, arr[i], cutoff):
                if v.axiom == ax.name:
                    findings.extend(v.findings)
                    chans.extend(c for c in v.channels if c not in chans)
        violated.append(Violation(ax.name, degrees[ax.name], tuple(chans), findings))
    return SatisfactionReport(degrees, total, violated)


def format_violations(violations: Sequence[Violation], origin: int | None = None) -> str:
    lines = []
    head = f"window {origin}: " if origin is not None else ""
    for v in violations:
        lines.append(f"{head}axiom {v.axiom} degree={v.degree:.4f} channels={','.join(v.channels)}")
        for f in v.findings:
            lo, hi = f.acceptable
            lines.append(f"    {f.atom}: observed {f.quantity}={f.observed:.6g}, "
                         f"acceptable [{lo:.6g}, {hi:.6g}], degree={f.degree:.4f}")
    return "\n".join(lines)
