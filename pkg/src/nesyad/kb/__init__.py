from .nodes import And, Axiom, Bound, Corr, Implies, KnowledgeBase, Not, Or, RateBound, atoms, channels_of
from .parser import KBSyntaxError, format_expr, format_kb, load, parse, tokenize
from .semantics import (
    SatisfactionReport,
    SchemaError,
    Violation,
    axiom_degrees,
    explain_window,
    format_violations,
    satisfaction,
    semantic_loss,
    total_satisfaction,
)

__all__ = [
    "And", "Axiom", "Bound", "Corr", "Implies", "KnowledgeBase", "Not", "Or", "RateBound",
    "atoms", "channels_of", "KBSyntaxError", "format_expr", "format_kb", "load", "parse",
    "tokenize", "SatisfactionReport", "SchemaError", "Violation", "axiom_degrees",
    "explain_window", "format_violations", "satisfaction", "semantic_loss", "total_satisfaction",
]
