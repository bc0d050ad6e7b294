"""Synthetic NL/LTL corpora with gold AP labels.

Three template domains with disjoint AP lexicons. Sentences are built
compositionally from the formula (every binary operator has a prefix
keyword, so the NL stays unambiguous), and some whole-formula skeletons
have their own idiomatic templates.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ltlforce.lifting import LiftedExample, canonical_ap, lift, unlift
from ltlforce.ltl import (
    Always,
    And,
    Eventually,
    Formula,
    Next,
    Not,
    Or,
    Implies,
    Prop,
    Until,
    parse_formula,
    props_of,
    relabel,
    render,
)

_UNARY = (Not, Next, Eventually, Always)
_BINARY = (And, Or, Implies, Until)
_OPERATORS = _UNARY + _BINARY


class TooManyProps(ValueError):
    pass


class SharedAP(ValueError):
    pass


@dataclass(frozen=True)
class DomainLexicon:
    name: str
    ap_phrases: tuple[str, ...]
    prop: tuple[str, ...]  # realizations of a bare AP mention, "{ap}" slot
    coref: tuple[str, ...]  # realizations of a repeated mention
    unary: dict  # node class -> tuple of prefix phrases
    binary: dict  # node class -> tuple of (prefix, infix) pairs
    skeletons: tuple[tuple[str, str], ...]  # (formula over prop_i, template with {i} slots)

    def __post_init__(self):
        if not self.ap_phrases:
            raise ValueError(f"{self.name}: empty AP lexicon")
        if len(set(self.ap_phrases)) != len(self.ap_phrases):
            raise ValueError(f"{self.name}: duplicate AP phrases")


def _colored(nouns, colors):
    return tuple(f"{c} {n}" for n in nouns for c in colors)


BLOCKS = DomainLexicon(
    name="blocks",
    ap_phrases=_colored(("room", "block", "box", "chair"),
                        ("red", "blue", "green", "yellow", "purple", "orange", "white", "black"))
    + ("large basket", "small basket", "toy bin", "wooden crate"),
    prop=("be in the {ap}", "occupy the {ap}"),
    coref=("be in the {ap} again",),
    unary={
        Not: ("do not",),
        Next: ("next", "in the next step"),
        Eventually: ("eventually", "at some point"),
        Always: ("always", "at all times"),
    },
    binary={
        And: (("both", "and"),),
        Or: (("either", "or"),),
        Implies: (("if", "then"),),
        Until: (("keep", "until"),),
    },
    skeletons=(
        ("F prop_1", "go to the {1}"),
        ("F prop_1", "enter the {1}"),
        ("F ( prop_1 AND F prop_2 )", "go to the {1} and push the box into the {2}"),
        ("F ( prop_1 AND F prop_2 )", "go to the {1} and then enter the {2}"),
        ("G NOT prop_1", "never enter the {1}"),
        ("( F prop_1 AND G NOT prop_2 )", "go to the {1} while avoiding the {2}"),
    ),
)

GRID = DomainLexicon(
    name="grid",
    ap_phrases=(
        "north west corner", "north east corner", "south west corner", "south east corner",
        "center cell", "upper row", "lower row", "left column", "right column",
        "goal square", "start square", "lava pit", "water cell", "ice patch", "sand patch",
        "grass patch", "key square", "door cell", "wall gap", "bridge cell", "tree cell",
        "rock cell", "coin square", "gem square", "flag square", "trap cell", "mud patch",
        "hill top", "valley floor", "shrine tile", "crimson tile", "azure tile", "amber tile",
        "violet tile", "teal tile", "ivory tile", "charcoal tile", "golden tile",
    ),
    prop=("be on the {ap}", "stand on the {ap}"),
    coref=("be on the {ap} once more",),
    unary={
        Not: ("do not", "it is not the case that you"),
        Next: ("next", "immediately afterwards"),
        Eventually: ("eventually", "sooner or later"),
        Always: ("always", "constantly"),
    },
    binary={
        And: (("both", "and"), ("both", "as well as")),
        Or: (("either", "or"), ("either", "or else")),
        Implies: (("if", "then"), ("whenever", "then")),
        Until: (("keep", "until"), ("continue to", "until")),
    },
    skeletons=(
        ("F prop_1", "move to the {1}"),
        ("F ( prop_1 AND F prop_2 )", "move to the {1} and later to the {2}"),
        ("( NOT prop_1 UNTIL prop_2 )", "avoid the {1} until you reach the {2}"),
        ("G NOT prop_1", "never step on the {1}"),
    ),
)

ROBOT = DomainLexicon(
    name="robot",
    ap_phrases=(
        "kitchen counter", "bedroom closet", "bathroom sink", "garage door", "front door",
        "back door", "dining table", "coffee machine", "charging station", "loading dock",
        "main hallway", "east hallway", "west hallway", "service elevator", "north staircase",
        "reception desk", "office printer", "mail room", "server room", "storage closet",
        "parking lot", "fire exit", "hotel lobby", "conference room", "break room",
        "laundry room", "rose garden", "stone patio", "water fountain", "bus stop",
        "gas station", "city bank", "post office", "corner pharmacy", "old bakery",
        "public library", "art museum", "train station", "police station", "city hospital",
    ),
    prop=("be at the {ap}", "be near the {ap}"),
    coref=("return to the {ap}",),
    unary={
        Not: ("you must not", "do not"),
        Next: ("in the next step", "right after that"),
        Eventually: ("at some point", "finally", "sooner or later"),
        Always: ("at all times", "forever", "always"),
    },
    binary={
        And: (("both", "and also"), ("both", "and")),
        Or: (("either", "or"),),
        Implies: (("if", "then you must"), ("if", "then")),
        Until: (("keep", "until you"), ("keep", "until")),
    },
    skeletons=(
        ("F prop_1", "navigate to the {1}"),
        ("F ( prop_1 AND F prop_2 )", "reach the {1} and then navigate to the {2}"),
        ("F ( prop_1 AND F ( prop_2 AND F prop_3 ) )", "visit the {1} , then the {2} , and finally the {3}"),
        ("G NOT prop_1", "never go near the {1}"),
    ),
)

DOMAINS = {lex.name: lex for lex in (BLOCKS, GRID, ROBOT)}


@dataclass
class GenConfig:
    seed: int = 0
    count: int = 500
    max_depth: int = 3
    max_aps: int = 5
    domain: str = "blocks"
    coref_prob: float = 0.2
    skeleton_prob: float = 0.3

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 1 <= self.max_aps <= 15:
            raise ValueError("max_aps must be in 1..15")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}; choose from {sorted(DOMAINS)}")


def sample_formula(rng: random.Random, max_depth: int, max_aps: int, coref_prob: float = 0.2) -> Formula:
    """Recursive sample; a node at depth d (root 0) recurses with prob 0.6**d.

    Props are numbered by first appearance and at most ``max_aps`` are used.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    used: list[int] = []

    def leaf() -> Prop:
        if used and (len(used) >= max_aps or rng.random() < coref_prob):
            return Prop(rng.choice(used))
        used.append(len(used) + 1)
        return Prop(used[-1])

    def node(d: int) -> Formula:
        if d + 1 >= max_depth or rng.random() >= 0.6 ** d:
            return leaf()
        op = rng.choice(_OPERATORS)
        if op in _UNARY:
            return op(node(d + 1))
        left = node(d + 1)
        return op(left, node(d + 1))

    return node(0)


def _match(pattern: Formula, f: Formula, binding: dict[int, Formula]) -> bool:
    if isinstance(pattern, Prop):
        if not isinstance(f, Prop):
            return False
        bound = binding.setdefault(pattern.index, f)
        return bound == f
    if type(pattern) is not type(f):
        return False
    if hasattr(pattern, "child"):
        return _match(pattern.child, f.child, binding)
    return _match(pattern.left, f.left, binding) and _match(pattern.right, f.right, binding)


_SKELETON_CACHE: dict[str, Formula] = {}


def _skeleton(text: str) -> Formula:
    if text not in _SKELETON_CACHE:
        _SKELETON_CACHE[text] = parse_formula(text)
    return _SKELETON_CACHE[text]


def _realize(f: Formula, lex: DomainLexicon, rng: random.Random, mentioned: set[int],
             skeleton_prob: float, out: list[tuple[str, int]]) -> None:
    """Append (word, prop index or 0) pairs realizing ``f``."""

    def words(text: str):
        out.extend((w, 0) for w in text.split())

    def mention(template: str, index: int, phrase: str):
        before, after = template.split("{ap}")
        words(before)
        out.extend((w, index) for w in phrase.split())
        words(after)

    if isinstance(f, Prop):
        choices = lex.coref if f.index in mentioned else lex.prop
        mention(rng.choice(choices), f.index, "{%d}" % f.index)
        mentioned.add(f.index)
        return

    candidates = []
    for pattern_text, template in lex.skeletons:
        binding: dict[int, Formula] = {}
        if _match(_skeleton(pattern_text), f, binding):
            idx = [binding[k].index for k in sorted(binding)]
            if len(set(idx)) == len(idx):
                candidates.append((template, binding))
    if candidates and rng.random() < skeleton_prob:
        template, binding = rng.choice(candidates)
        for w in template.split():
            if w.startswith("{") and w.endswith("}"):
                index = binding[int(w[1:-1])].index
                out.append(("{%d}" % index, index))
                mentioned.add(index)
            else:
                out.append((w, 0))
        return

    if type(f) in lex.unary:
        words(rng.choice(lex.unary[type(f)]))
        _realize(f.child, lex, rng, mentioned, skeleton_prob, out)
        return
    prefix, infix = rng.choice(lex.binary[type(f)])
    words(prefix)
    _realize(f.left, lex, rng, mentioned, skeleton_prob, out)
    words(infix)
    _realize(f.right, lex, rng, mentioned, skeleton_prob, out)


def render_example(f: Formula, lex: DomainLexicon, rng: random.Random, skeleton_prob: float = 0.7) -> LiftedExample:
    """Realize a formula as an NL sentence with gold labels and AP map."""
    props = props_of(f)
    if len(props) > len(lex.ap_phrases):
        raise TooManyProps(f"{len(props)} props but only {len(lex.ap_phrases)} AP phrases")
    phrases = dict(zip(props, rng.sample(lex.ap_phrases, len(props))))
    pieces: list[tuple[str, int]] = []
    _realize(f, lex, rng, set(), skeleton_prob, pieces)

    tokens: list[str] = []
    marks: list[int] = []
    for w, index in pieces:
        if index and w.startswith("{"):
            for pw in phrases[index].split():
                tokens.append(pw)
                marks.append(index)
        else:
            tokens.append(w)
            marks.append(0)
    tokens[0] = tokens[0][:1].upper() + tokens[0][1:]
    tokens.append(".")
    marks.append(0)

    # ids by first appearance in the sentence; the formula is renumbered to match
    order: dict[int, int] = {}
    for m in marks:
        if m and m not in order:
            order[m] = len(order) + 1
    labels = [order[m] if m else 0 for m in marks]
    lifted_tl = relabel(f, order)
    lifted_nl, ap_map = lift(tokens, labels)
    return LiftedExample(
        tokens=tokens,
        labels=labels,
        lifted_nl=lifted_nl,
        ap_map=ap_map,
        lifted_tl=lifted_tl,
        grounded_tl=unlift(lifted_tl, ap_map, ascii=True),
        domain=lex.name,
    )


CONNECTIVES = ((("and", "then"), And), (("until",), Until))


def concat_examples(a: LiftedExample, b: LiftedExample, rng: random.Random) -> LiftedExample:
    """Join two examples with disjoint APs; b's ids shift past a's."""
    shared = {canonical_ap(t) for t in a.ap_map.values()} & {canonical_ap(t) for t in b.ap_map.values()}
    if shared:
        raise SharedAP(f"examples share APs: {sorted(shared)}")
    words, op = rng.choice(CONNECTIVES)
    k = max(a.labels, default=0)
    a_tokens, a_labels = list(a.tokens), list(a.labels)
    if a_tokens and a_tokens[-1] == "." and a_labels[-1] == 0:
        a_tokens.pop()
        a_labels.pop()
    b_tokens = list(b.tokens)
    if b_tokens and b.labels[0] == 0:
        b_tokens[0] = b_tokens[0].lower()
    tokens = a_tokens + list(words) + b_tokens
    labels = a_labels + [0] * len(words) + [lab + k if lab else 0 for lab in b.labels]
    shift = {i: i + k for i in props_of(b.lifted_tl)}
    lifted_tl = op(a.lifted_tl, relabel(b.lifted_tl, shift))
    lifted_nl, ap_map = lift(tokens, labels)
    return LiftedExample(
        tokens=tokens,
        labels=labels,
        lifted_nl=lifted_nl,
        ap_map=ap_map,
        lifted_tl=lifted_tl,
        grounded_tl=unlift(lifted_tl, ap_map, ascii=True),
        domain=a.domain if a.domain == b.domain else f"{a.domain}+{b.domain}",
    )


def _sample_skeleton(lex: DomainLexicon, rng: random.Random) -> Formula:
    return _skeleton(rng.choice(lex.skeletons)[0])


def gen_corpus(cfg: GenConfig) -> list[LiftedExample]:
    lex = DOMAINS[cfg.domain]
    rng = random.Random(cfg.seed)
    out = []
    for _ in range(cfg.count):
        if rng.random() < cfg.skeleton_prob:
            f = _sample_skeleton(lex, rng)
            if len(props_of(f)) > cfg.max_aps:
                f = sample_formula(rng, cfg.max_depth, cfg.max_aps, cfg.coref_prob)
        else:
            f = sample_formula(rng, cfg.max_depth, cfg.max_aps, cfg.coref_prob)
        out.append(render_example(f, lex, rng))
    return out


def corpus_stats(corpus: Sequence[LiftedExample]) -> dict:
    """Unique NL sentences, unique lifted formulas, unique lowercased words."""
    return {
        "n_nl": len({" ".join(ex.tokens) for ex in corpus}),
        "n_ltl": len({render(ex.lifted_tl, ascii=True) for ex in corpus}),
        "vocab": len({w.lower() for ex in corpus for w in ex.tokens}),
    }


# --------------------------------------------------------------------------
# JSONL


def to_record(ex: LiftedExample) -> dict:
    return {
        "nl": " ".join(ex.tokens),
        "tokens": list(ex.tokens),
        "labels": list(ex.labels),
        "lifted_nl": ex.lifted_nl,
        "ap_map": {str(k): v for k, v in sorted(ex.ap_map.items())},
        "lifted_tl": render(ex.lifted_tl, ascii=True),
        "grounded_tl": ex.grounded_tl,
        "domain": ex.domain,
    }


def from_record(rec: dict) -> LiftedExample:
    return LiftedExample(
        tokens=list(rec["tokens"]),
        labels=[int(x) for x in rec["labels"]],
        lifted_nl=rec["lifted_nl"],
        ap_map={int(k): v for k, v in rec["ap_map"].items()},
        lifted_tl=parse_formula(rec["lifted_tl"]),
        grounded_tl=rec["grounded_tl"],
        domain=rec.get("domain", ""),
    )


def write_jsonl(path, corpus: Iterable[LiftedExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in corpus:
            fh.write(json.dumps(to_record(ex), ensure_ascii=False, sort_keys=False) + "\n")


def read_jsonl(path) -> list[LiftedExample]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(from_record(json.loads(line)))
    return out


def config_dict(cfg: GenConfig) -> dict:
    return asdict(cfg)


__all__ = [
    "BLOCKS",
    "DOMAINS",
    "DomainLexicon",
    "GRID",
    "GenConfig",
    "ROBOT",
    "SharedAP",
    "TooManyProps",
    "concat_examples",
    "corpus_stats",
    "from_record",
    "gen_corpus",
    "read_jsonl",
    "render_example",
    "sample_formula",
    "to_record",
    "write_jsonl",
]
