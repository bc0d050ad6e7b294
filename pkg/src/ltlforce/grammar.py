"""Incremental pushdown recognizer for the LTL surface grammar.

A state is a stack of expectation symbols; the top alone determines
which tokens may come next. States are immutable tuples so they can be
threaded through decoding or training without copying concerns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ltlforce.ltl import BINARY_KINDS, UNARY_KINDS, Vocab

EXPECT_FORMULA = 0
EXPECT_BINOP = 1
EXPECT_RPAREN = 2
EXPECT_EOS = 3

SYMBOL_NAMES = ("EXPECT_FORMULA", "EXPECT_BINOP", "EXPECT_RPAREN", "EXPECT_EOS")


class InvalidToken(ValueError):
    def __init__(self, token: int, state: "GrammarState"):
        super().__init__(f"token {token} is not valid in state {state}")
        self.token = token
        self.state = state


class TerminalState(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class GrammarState:
    stack: tuple[int, ...]  # top is the last element
    consumed: int = 0

    @property
    def top(self) -> int:
        return self.stack[-1]

    def __str__(self) -> str:
        names = ", ".join(SYMBOL_NAMES[s] for s in self.stack)
        return f"GrammarState([{names}], consumed={self.consumed})"


class Grammar:
    """Valid-next-token engine specialised to one vocabulary."""

    def __init__(self, vocab: Vocab | int = 5):
        self.vocab = vocab if isinstance(vocab, Vocab) else Vocab(vocab)
        v = self.vocab
        formula_ids = list(range(v.max_props)) + [v.id(k) for k in UNARY_KINDS] + [v.LPAREN]
        self._valid = {
            EXPECT_FORMULA: frozenset(formula_ids),
            EXPECT_BINOP: frozenset(v.id(k) for k in BINARY_KINDS),
            EXPECT_RPAREN: frozenset([v.RPAREN]),
            EXPECT_EOS: frozenset([v.EOS]),
        }
        self._masks = {}
        for sym, ids in self._valid.items():
            m = np.zeros(v.size, dtype=bool)
            m[list(ids)] = True
            m.setflags(write=False)
            self._masks[sym] = m
        self._unary = frozenset(v.id(k) for k in UNARY_KINDS)

    def init_state(self) -> GrammarState:
        return GrammarState((EXPECT_EOS, EXPECT_FORMULA), 0)

    def is_accepting(self, s: GrammarState) -> bool:
        return not s.stack

    def valid_tokens(self, s: GrammarState, budget: int | None = None) -> frozenset[int]:
        """Tokens accepted by ``update``.

        With ``budget`` (tokens still allowed, EOS included), only tokens
        after which the state can still be completed within budget are kept.
        """
        if not s.stack:
            raise TerminalState("no tokens are valid after EOS")
        valid = self._valid[s.top]
        if budget is None:
            return valid
        return frozenset(t for t in valid if self._cost_after(s, t) <= budget - 1)

    def valid_mask(self, s: GrammarState, budget: int | None = None) -> np.ndarray:
        """Boolean mask over the vocabulary; read-only when unbudgeted."""
        if not s.stack:
            raise TerminalState("no tokens are valid after EOS")
        if budget is None or self.min_completion_cost(s) + 3 <= budget - 1:
            return self._masks[s.top]
        m = np.zeros(self.vocab.size, dtype=bool)
        m[list(self.valid_tokens(s, budget))] = True
        return m

    def min_completion_cost(self, s: GrammarState) -> int:
        # every expectation symbol is discharged by exactly one token at best
        return len(s.stack)

    def _cost_after(self, s: GrammarState, t: int) -> int:
        if s.top == EXPECT_FORMULA:
            if t == self.vocab.LPAREN:
                return len(s.stack) + 3
            if t in self._unary:
                return len(s.stack)
        return len(s.stack) - 1

    def update(self, s: GrammarState, t: int) -> GrammarState:
        if not s.stack:
            raise InvalidToken(t, s)
        top = s.top
        if t not in self._valid[top]:
            raise InvalidToken(t, s)
        rest = s.stack[:-1]
        if top == EXPECT_FORMULA:
            if t == self.vocab.LPAREN:
                stack = rest + (EXPECT_RPAREN, EXPECT_FORMULA, EXPECT_BINOP, EXPECT_FORMULA)
            elif t in self._unary:
                stack = s.stack
            else:
                stack = rest
        else:
            stack = rest
        return GrammarState(stack, s.consumed + 1)

    def run(self, tokens, state: GrammarState | None = None) -> GrammarState:
        s = self.init_state() if state is None else state
        for t in tokens:
            s = self.update(s, t)
        return s

    def accepts(self, tokens) -> bool:
        """True iff ``tokens`` drives the engine from init to an accepting state."""
        try:
            return self.is_accepting(self.run(tokens))
        except InvalidToken:
            return False

    def target_masks(self, tokens) -> np.ndarray:
        """Valid-set masks for each position of a target sequence.

        Row ``t`` is the valid set before ``tokens[t]``, with the state driven
        by the target tokens themselves (teacher-style). Raises
        ``InvalidToken`` if a target token falls outside its valid set.
        """
        out = np.zeros((len(tokens), self.vocab.size), dtype=bool)
        s = self.init_state()
        for i, t in enumerate(tokens):
            out[i] = self._masks[s.top] if s.stack else False
            s = self.update(s, t)
        return out
