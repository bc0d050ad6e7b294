"""Grammar-forced translation of natural language to linear temporal logic."""

from ltlforce.ltl import (
    Always,
    And,
    Eventually,
    Formula,
    Implies,
    Next,
    Not,
    Or,
    Prop,
    Until,
    Vocab,
    ast_equal,
    parse_formula,
    render,
)
from ltlforce.grammar import Grammar, GrammarState

__all__ = [
    "Always",
    "And",
    "Eventually",
    "Formula",
    "Grammar",
    "GrammarState",
    "Implies",
    "Next",
    "Not",
    "Or",
    "Prop",
    "Until",
    "Vocab",
    "ast_equal",
    "parse_formula",
    "render",
]

__version__ = "0.1.0"
