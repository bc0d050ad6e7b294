"""LTL formula AST, surface tokens, parser and printer.

Surface grammar (LL(1)):

    phi ::= prop_i | U phi | "(" phi B phi ")"
    U   ::= NOT | NEXT | EVENTUALLY | ALWAYS
    B   ::= AND | OR | IMPLIES | UNTIL

Operators are written in Unicode (``¬ ○ ◇ □ ∧ ∨ ⇒ ∪``) by default and in
ASCII (``NOT X F G AND OR IMPLIES UNTIL``) for files. Both are accepted on
input, as are ``LPAREN``/``RPAREN`` for the brackets. A single trailing
``EOS`` is tolerated so decoder output can be parsed directly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union


@dataclass(frozen=True, slots=True)
class Prop:
    index: int

    def __post_init__(self):
        if not isinstance(self.index, int) or self.index < 1:
            raise ValueError(f"proposition index must be a positive int, got {self.index!r}")


@dataclass(frozen=True, slots=True)
class Not:
    child: "Formula"


@dataclass(frozen=True, slots=True)
class Next:
    child: "Formula"


@dataclass(frozen=True, slots=True)
class Eventually:
    child: "Formula"


@dataclass(frozen=True, slots=True)
class Always:
    child: "Formula"


@dataclass(frozen=True, slots=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True, slots=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True, slots=True)
class Implies:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True, slots=True)
class Until:
    left: "Formula"
    right: "Formula"


Formula = Union[Prop, Not, Next, Eventually, Always, And, Or, Implies, Until]

UNARY_KINDS = ("NOT", "NEXT", "EVENTUALLY", "ALWAYS")
BINARY_KINDS = ("AND", "OR", "IMPLIES", "UNTIL")
OPERATOR_KINDS = UNARY_KINDS + BINARY_KINDS + ("LPAREN", "RPAREN", "EOS")

UNARY_NODES = {"NOT": Not, "NEXT": Next, "EVENTUALLY": Eventually, "ALWAYS": Always}
BINARY_NODES = {"AND": And, "OR": Or, "IMPLIES": Implies, "UNTIL": Until}
_NODE_KIND = {cls: kind for kind, cls in {**UNARY_NODES, **BINARY_NODES}.items()}

UNICODE = {
    "NOT": "¬", "NEXT": "○", "EVENTUALLY": "◇", "ALWAYS": "□",
    "AND": "∧", "OR": "∨", "IMPLIES": "⇒", "UNTIL": "∪",
    "LPAREN": "(", "RPAREN": ")", "EOS": "EOS",
}
ASCII = {
    "NOT": "NOT", "NEXT": "X", "EVENTUALLY": "F", "ALWAYS": "G",
    "AND": "AND", "OR": "OR", "IMPLIES": "IMPLIES", "UNTIL": "UNTIL",
    "LPAREN": "(", "RPAREN": ")", "EOS": "EOS",
}

_SURFACE_TO_KIND: dict[str, str] = {}
for _table in (UNICODE, ASCII):
    for _kind, _sym in _table.items():
        _SURFACE_TO_KIND[_sym] = _kind
_SURFACE_TO_KIND.update({
    "LPAREN": "LPAREN", "RPAREN": "RPAREN",
    "NEXT": "NEXT", "EVENTUALLY": "EVENTUALLY", "ALWAYS": "ALWAYS",
    # common alternates seen in hand-written formulas
    "!": "NOT", "~": "NOT", "&": "AND", "|": "OR", "->": "IMPLIES", "=>": "IMPLIES",
    "U": "UNTIL", "◯": "NEXT", "⋄": "EVENTUALLY", "◊": "EVENTUALLY", "→": "IMPLIES",
})

_PROP_RE = re.compile(r"prop_([1-9][0-9]*)\Z")
_ATOM_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


class FormulaSyntaxError(ValueError):
    """Base class of all parse errors; ``position`` is the offending token index."""

    def __init__(self, position: int, message: str):
        super().__init__(f"{message} at token {position}")
        self.position = position


class UnbalancedParen(FormulaSyntaxError):
    pass


class UnexpectedToken(FormulaSyntaxError):
    pass


class TrailingTokens(FormulaSyntaxError):
    pass


class UnknownToken(FormulaSyntaxError):
    pass


def prop_kind(index: int) -> str:
    return f"prop_{index}"


def is_prop_kind(kind: str) -> bool:
    return kind.startswith("prop_")


def prop_index(kind: str) -> int:
    return int(kind[5:])


class Vocab:
    """Bijection between surface token kinds and integer ids.

    Ids ``0..max_props-1`` are ``prop_1..prop_max``; operators follow in
    ``OPERATOR_KINDS`` order, so ``size == max_props + 11``.
    """

    def __init__(self, max_props: int = 5):
        if max_props < 1:
            raise ValueError("max_props must be >= 1")
        self.max_props = max_props
        self.kinds: tuple[str, ...] = tuple(prop_kind(i) for i in range(1, max_props + 1)) + OPERATOR_KINDS
        self._ids = {k: i for i, k in enumerate(self.kinds)}
        for kind in OPERATOR_KINDS:
            setattr(self, kind, self._ids[kind])

    @property
    def size(self) -> int:
        return len(self.kinds)

    def __len__(self) -> int:
        return len(self.kinds)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and other.max_props == self.max_props

    def __hash__(self) -> int:
        return hash(("Vocab", self.max_props))

    def __repr__(self) -> str:
        return f"Vocab(max_props={self.max_props})"

    def id(self, kind: str) -> int:
        return self._ids[kind]

    def kind(self, token_id: int) -> str:
        return self.kinds[token_id]

    def prop_id(self, index: int) -> int:
        return index - 1

    def encode(self, f: Formula, eos: bool = True) -> list[int]:
        ids = [self._ids[k] for k in to_kinds(f)]
        if eos:
            ids.append(self.EOS)
        return ids

    def decode(self, ids: Iterable[int]) -> Formula:
        """Parse a token-id sequence (optionally EOS-terminated)."""
        return parse_kinds([self.kinds[i] for i in ids], self.max_props)

    def to_text(self, ids: Iterable[int], ascii: bool = False) -> str:
        table = ASCII if ascii else UNICODE
        return " ".join(table.get(k, k) for k in (self.kinds[i] for i in ids))


def to_kinds(f: Formula) -> list[str]:
    out: list[str] = []
    stack: list = [f]
    while stack:
        node = stack.pop()
        if isinstance(node, str):
            out.append(node)
        elif isinstance(node, Prop):
            out.append(prop_kind(node.index))
        elif type(node) in (Not, Next, Eventually, Always):
            out.append(_NODE_KIND[type(node)])
            stack.append(node.child)
        else:
            stack.extend(("RPAREN", node.right, _NODE_KIND[type(node)], node.left))
            out.append("LPAREN")
    return out


def render(f: Formula, ascii: bool = False, names: Mapping[int, str] | None = None) -> str:
    """Canonical surface string. ``names`` substitutes atom names for props."""
    table = ASCII if ascii else UNICODE
    parts = []
    for kind in to_kinds(f):
        if is_prop_kind(kind):
            parts.append(names[prop_index(kind)] if names is not None else kind)
        else:
            parts.append(table[kind])
    return " ".join(parts)


def lex(text: str, max_props: int | None = None) -> list[str]:
    kinds = []
    for pos, tok in enumerate(text.split()):
        kind = _SURFACE_TO_KIND.get(tok)
        if kind is None:
            m = _PROP_RE.match(tok)
            if m is None or (max_props is not None and int(m.group(1)) > max_props):
                raise UnknownToken(pos, f"unknown token {tok!r}")
            kind = tok
        kinds.append(kind)
    return kinds


def parse_kinds(kinds: Sequence[str], max_props: int | None = None) -> Formula:
    """Parse a list of token kinds. Raises a ``FormulaSyntaxError`` subclass."""
    n = len(kinds)
    if max_props is not None:
        for pos, kind in enumerate(kinds):
            if is_prop_kind(kind) and prop_index(kind) > max_props:
                raise UnknownToken(pos, f"proposition {kind} exceeds max_props={max_props}")

    def phi(i: int, depth: int) -> tuple[Formula, int]:
        if i >= n:
            if depth:
                raise UnbalancedParen(i, "input ended inside parentheses")
            raise UnexpectedToken(i, "expected a formula, found end of input")
        kind = kinds[i]
        if is_prop_kind(kind):
            return Prop(prop_index(kind)), i + 1
        if kind in UNARY_NODES:
            child, j = phi(i + 1, depth)
            return UNARY_NODES[kind](child), j
        if kind == "LPAREN":
            left, j = phi(i + 1, depth + 1)
            if j >= n:
                raise UnbalancedParen(j, "input ended inside parentheses")
            op = kinds[j]
            if op not in BINARY_NODES:
                raise UnexpectedToken(j, f"expected a binary operator, found {op}")
            right, k = phi(j + 1, depth + 1)
            if k >= n:
                raise UnbalancedParen(k, "input ended inside parentheses")
            if kinds[k] != "RPAREN":
                raise UnexpectedToken(k, f"expected ')', found {kinds[k]}")
            return BINARY_NODES[op](left, right), k + 1
        if kind == "RPAREN" and depth == 0:
            raise UnbalancedParen(i, "')' without matching '('")
        raise UnexpectedToken(i, f"expected a formula, found {kind}")

    f, i = phi(0, 0)
    if i < n:
        if kinds[i] == "EOS" and i == n - 1:
            return f
        if kinds[i] == "RPAREN":
            raise UnbalancedParen(i, "')' without matching '('")
        raise TrailingTokens(i, f"unexpected trailing {kinds[i]}")
    return f


def parse_formula(text: str, max_props: int | None = None) -> Formula:
    """Parse whitespace-separated surface tokens into a Formula."""
    return parse_kinds(lex(text, max_props), max_props)


def parse_grounded(text: str) -> tuple[Formula, list[str]]:
    """Parse a formula over named atoms.

    Atoms are numbered by first appearance; returns the formula over
    ``prop_i`` and the list of names (``names[i-1]`` is ``prop_i``).
    """
    kinds = []
    names: list[str] = []
    for pos, tok in enumerate(text.split()):
        kind = _SURFACE_TO_KIND.get(tok)
        if kind is None:
            if not _ATOM_RE.match(tok):
                raise UnknownToken(pos, f"invalid atom {tok!r}")
            if tok not in names:
                names.append(tok)
            kind = prop_kind(names.index(tok) + 1)
        kinds.append(kind)
    return parse_kinds(kinds), names


def ast_equal(a: Formula, b: Formula) -> bool:
    """Structural equality, no semantic normalization."""
    return a == b


def props_of(f: Formula) -> list[int]:
    """Distinct proposition indices in order of first appearance."""
    seen: list[int] = []
    for kind in to_kinds(f):
        if is_prop_kind(kind):
            i = prop_index(kind)
            if i not in seen:
                seen.append(i)
    return seen


def depth(f: Formula) -> int:
    if isinstance(f, Prop):
        return 1
    if hasattr(f, "child"):
        return 1 + depth(f.child)
    return 1 + max(depth(f.left), depth(f.right))


def relabel(f: Formula, mapping: Mapping[int, int]) -> Formula:
    if isinstance(f, Prop):
        return Prop(mapping[f.index])
    if hasattr(f, "child"):
        return type(f)(relabel(f.child, mapping))
    return type(f)(relabel(f.left, mapping), relabel(f.right, mapping))
