"""Greedy decoding with optional grammar-constrained logits processing."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ltlforce.grammar import Grammar
from ltlforce.losses import EmptyValidSet, constrained_softmax, mask_logits, softmax
from ltlforce.ltl import Formula, FormulaSyntaxError
from ltlforce.model import ModelParams, decoder_step, encode, pad_batch, start_tokens

__all__ = [
    "EmptyValidSet",
    "ParseFailure",
    "constrained_softmax",
    "greedy_decode",
    "greedy_decode_batch",
    "mask_logits",
    "process_logits",
    "softmax",
    "translate",
    "translate_batch",
]


class ParseFailure(ValueError):
    def __init__(self, tokens: Sequence[int], cause: FormulaSyntaxError):
        super().__init__(f"decoded tokens do not form a formula: {cause}")
        self.tokens = list(tokens)
        self.cause = cause


def process_logits(grammar: Grammar, input_ids: Sequence[int], scores: np.ndarray) -> np.ndarray:
    """Mask a (len(input_ids), V) score matrix row by row.

    Row ``i`` keeps only the tokens valid after ``input_ids[:i]``.
    """
    scores = np.array(scores, dtype=np.float64)
    state = grammar.init_state()
    for i in range(len(input_ids)):
        if i > 0:
            state = grammar.update(state, input_ids[i - 1])
        scores[i] = mask_logits(scores[i], grammar.valid_mask(state))
    return scores


def greedy_decode_batch(params: ModelParams, srcs: Sequence[Sequence[int]], max_len: int,
                        constrained: bool, grammar: Grammar) -> list[list[int]]:
    """Argmax decoding of a batch of sources (ties go to the lowest id).

    Constrained decoding threads one grammar state per row and masks with
    the remaining length budget, so every output is an accepted sequence
    of at most ``max_len`` tokens ending in EOS.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    src, src_mask = pad_batch(srcs)
    B = len(srcs)
    eos = grammar.vocab.EOS
    enc = encode(params, src, src_mask)
    s = enc.final
    prev = start_tokens(params, B)
    states = [grammar.init_state() for _ in range(B)]
    outs: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for step in range(max_len):
        z, s, _ = decoder_step(params, enc, s, prev)
        if constrained:
            budget = max_len - step
            for b in range(B):
                if not done[b]:
                    z[b] = np.where(grammar.valid_mask(states[b], budget), z[b], -np.inf)
        nxt = z.argmax(axis=1)
        for b in range(B):
            if done[b]:
                continue
            tok = int(nxt[b])
            outs[b].append(tok)
            if constrained:
                states[b] = grammar.update(states[b], tok)
                done[b] = grammar.is_accepting(states[b])
            else:
                done[b] = tok == eos
        if done.all():
            break
        prev = nxt
    return outs


def greedy_decode(params: ModelParams, src: Sequence[int], max_len: int, constrained: bool,
                  grammar: Grammar) -> list[int]:
    return greedy_decode_batch(params, [src], max_len, constrained, grammar)[0]


def translate_batch(params: ModelParams, srcs, constrained: bool, max_len: int,
                    grammar: Grammar) -> list[Formula | ParseFailure]:
    """Decode and parse; failures are returned in place rather than raised."""
    results: list[Formula | ParseFailure] = []
    for toks in greedy_decode_batch(params, srcs, max_len, constrained, grammar):
        try:
            results.append(grammar.vocab.decode(toks))
        except FormulaSyntaxError as err:
            results.append(ParseFailure(toks, err))
    return results


def translate(params: ModelParams, src: Sequence[int], constrained: bool, max_len: int,
              grammar: Grammar) -> Formula:
    out = translate_batch(params, [src], constrained, max_len, grammar)[0]
    if isinstance(out, ParseFailure):
        raise out
    return out
