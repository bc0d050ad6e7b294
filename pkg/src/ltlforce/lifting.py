"""Integer AP labeling, lifting, grounding and a perceptron tagger.

Labels: ``0`` marks a token outside any atomic proposition, ``n >= 1``
marks a token inside the n-th AP (ids numbered by first appearance).
Co-referent spans share an id.
"""

from __future__ import annotations

import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ltlforce.ltl import Formula, props_of, render

DEFAULT_MAX_LABEL = 5


class LabelError(ValueError):
    pass


class NonContiguousIds(LabelError):
    pass


class LabelOutOfRange(LabelError):
    pass


class MissingAP(KeyError):
    def __init__(self, index: int):
        super().__init__(index)
        self.index = index

    def __str__(self) -> str:
        return f"no AP for prop_{self.index}"


class EmptyCorpus(ValueError):
    pass


@dataclass
class LiftedExample:
    tokens: list[str]
    labels: list[int]
    lifted_nl: str
    ap_map: dict[int, str]
    lifted_tl: Formula
    grounded_tl: str
    domain: str = ""

    @property
    def nl(self) -> str:
        return " ".join(self.tokens)


def spans(labels: Sequence[int]) -> list[tuple[int, int, int]]:
    """Maximal runs of equal nonzero labels as (start, end, id)."""
    out = []
    i = 0
    while i < len(labels):
        if labels[i]:
            j = i
            while j < len(labels) and labels[j] == labels[i]:
                j += 1
            out.append((i, j, labels[i]))
            i = j
        else:
            i += 1
    return out


def check_labels(labels: Sequence[int], max_label: int | None = None) -> None:
    next_id = 1
    for pos, lab in enumerate(labels):
        if lab < 0 or (max_label is not None and lab > max_label):
            raise LabelOutOfRange(f"label {lab} at position {pos} outside 0..{max_label}")
        if lab > next_id:
            raise NonContiguousIds(f"label {lab} at position {pos} appears before id {next_id}")
        if lab == next_id:
            next_id += 1


def canonical_labels(labels: Sequence[int]) -> list[int]:
    """Renumber nonzero ids by order of first appearance."""
    remap: dict[int, int] = {}
    out = []
    for lab in labels:
        if lab and lab not in remap:
            remap[lab] = len(remap) + 1
        out.append(remap[lab] if lab else 0)
    return out


def lift(tokens: Sequence[str], labels: Sequence[int], max_label: int | None = None) -> tuple[str, dict[int, str]]:
    """Replace each AP span by ``prop_n``; ``ap_map[n]`` is the first span's text."""
    if len(tokens) != len(labels):
        raise LabelError(f"{len(tokens)} tokens but {len(labels)} labels")
    check_labels(labels, max_label)
    out: list[str] = []
    ap_map: dict[int, str] = {}
    i = 0
    for start, end, n in spans(labels):
        out.extend(tokens[i:start])
        out.append(f"prop_{n}")
        ap_map.setdefault(n, " ".join(tokens[start:end]))
        i = end
    out.extend(tokens[i:])
    return " ".join(out), ap_map


def canonical_ap(text: str) -> str:
    return "_".join(text.lower().split())


def unlift(lifted_tl: Formula, ap_map: Mapping[int, str], ascii: bool = False) -> str:
    """Render a lifted formula with each prop replaced by its grounded AP name."""
    names = {}
    for i in props_of(lifted_tl):
        if i not in ap_map:
            raise MissingAP(i)
        names[i] = canonical_ap(ap_map[i])
    return render(lifted_tl, ascii=ascii, names=names)


# --------------------------------------------------------------------------
# tagger
#
# Tokens are tagged O / B / I left to right with an averaged perceptron.
# AP ids are then assigned deterministically: a span whose lowercased text
# matches an earlier span reuses that span's id, otherwise it opens the next
# id. This keeps co-referent mentions consistent and the output canonical.

TAGS = ("O", "B", "I")


def _shape(w: str) -> str:
    if w.isdigit():
        return "digit"
    if w.isalpha():
        return "title" if w[:1].isupper() else "alpha"
    return "other"


def token_features(tokens: Sequence[str], i: int, prev_tag: str, seen_ap_words: set[str],
                   n_spans: int) -> list[str]:
    low = [t.lower() for t in tokens]
    n = len(tokens)

    def at(k):
        j = i + k
        if j < 0:
            return "<s>"
        if j >= n:
            return "</s>"
        return low[j]

    w = low[i]
    feats = [
        "bias",
        "w=" + tokens[i],
        "lw=" + w,
        "shape=" + _shape(tokens[i]),
        "suf3=" + w[-3:],
        "w-1=" + at(-1),
        "w-2=" + at(-2),
        "w+1=" + at(1),
        "w+2=" + at(2),
        "w-1w=" + at(-1) + "|" + w,
        "ww+1=" + w + "|" + at(1),
        "w-2w-1=" + at(-2) + "|" + at(-1),
        "w+1w+2=" + at(1) + "|" + at(2),
        "prev=" + prev_tag,
        "prev|w=" + prev_tag + "|" + w,
        "prev|w-1=" + prev_tag + "|" + at(-1),
    ]
    if w in seen_ap_words:
        feats.append("seen_ap")
        feats.append("seen_ap|prev=" + prev_tag)
    # how far into the sentence, and how many APs already opened (bucketed)
    feats.append("pos=%d" % min(4, (5 * i) // max(n, 1)))
    feats.append("spans=%d" % min(n_spans, 3))
    return feats


@dataclass
class Tagger:
    weights: dict[str, dict[str, float]] = field(default_factory=dict)
    max_label: int = DEFAULT_MAX_LABEL
    tags: tuple[str, ...] = TAGS

    def score(self, feats: Sequence[str]) -> dict[str, float]:
        scores = dict.fromkeys(self.tags, 0.0)
        for f in feats:
            row = self.weights.get(f)
            if row:
                for tag, w in row.items():
                    scores[tag] += w
        return scores

    def best(self, feats: Sequence[str]) -> str:
        scores = self.score(feats)
        # ties resolve to the earliest tag, so unknown evidence means "O"
        return max(self.tags, key=lambda t: (scores[t], -self.tags.index(t)))

    def tag(self, tokens: Sequence[str]) -> list[str]:
        tags: list[str] = []
        seen: set[str] = set()
        n_spans = 0
        span_words: list[str] = []
        prev = "<s>"
        for i in range(len(tokens)):
            t = self.best(token_features(tokens, i, prev, seen, n_spans))
            if t == "I" and prev in ("O", "<s>"):
                t = "B"
            if t == "B":
                n_spans += 1
            if t in ("B", "I"):
                span_words.append(tokens[i].lower())
            else:
                seen.update(span_words)
                span_words = []
            tags.append(t)
            prev = t
        return tags


def tags_from_labels(labels: Sequence[int]) -> list[str]:
    out = []
    prev = 0
    for lab in labels:
        if lab == 0:
            out.append("O")
        elif lab == prev:
            out.append("I")
        else:
            out.append("B")
        prev = lab
    return out


def labels_from_tags(tokens: Sequence[str], tags: Sequence[str], max_label: int | None = None) -> list[int]:
    labels = [0] * len(tokens)
    ids: dict[str, int] = {}
    i = 0
    n = len(tags)
    while i < n:
        if tags[i] == "O":
            i += 1
            continue
        j = i + 1
        while j < n and tags[j] == "I":
            j += 1
        key = " ".join(t.lower() for t in tokens[i:j])
        if key not in ids:
            if max_label is not None and len(ids) >= max_label:
                i = j
                continue
            ids[key] = len(ids) + 1
        for k in range(i, j):
            labels[k] = ids[key]
        i = j
    return labels


def train_tagger(corpus: Sequence[LiftedExample], epochs: int = 8, seed: int = 0,
                 max_label: int = DEFAULT_MAX_LABEL) -> Tagger:
    """Averaged perceptron over O/B/I tags with greedy left-to-right decoding."""
    if not corpus:
        raise EmptyCorpus("cannot train a tagger on an empty corpus")
    data = [(list(ex.tokens), tags_from_labels(ex.labels)) for ex in corpus]
    weights: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
    totals: dict[tuple[str, str], float] = defaultdict(float)
    stamps: dict[tuple[str, str], int] = defaultdict(int)
    model = Tagger({}, max_label)
    model.weights = weights  # live view while training
    clock = 0
    rng = random.Random(seed)
    order = list(range(len(data)))

    def bump(f, tag, v):
        key = (f, tag)
        totals[key] += (clock - stamps[key]) * weights[f][tag]
        stamps[key] = clock
        weights[f][tag] += v

    for _ in range(epochs):
        rng.shuffle(order)
        for idx in order:
            tokens, gold = data[idx]
            seen: set[str] = set()
            span_words: list[str] = []
            n_spans = 0
            prev = "<s>"
            for i, g in enumerate(gold):
                feats = token_features(tokens, i, prev, seen, n_spans)
                guess = model.best(feats)
                clock += 1
                if guess != g:
                    for f in feats:
                        bump(f, g, 1.0)
                        bump(f, guess, -1.0)
                # teacher-forced history
                if g == "B":
                    n_spans += 1
                if g in ("B", "I"):
                    span_words.append(tokens[i].lower())
                else:
                    seen.update(span_words)
                    span_words = []
                prev = g

    averaged: dict[str, dict[str, float]] = {}
    for f, row in weights.items():
        out = {}
        for tag, w in row.items():
            key = (f, tag)
            total = totals[key] + (clock - stamps[key]) * w
            avg = total / max(clock, 1)
            if avg != 0.0:
                out[tag] = avg
        if out:
            averaged[f] = out
    return Tagger(averaged, max_label)


def predict_labels(tagger: Tagger, tokens: Sequence[str]) -> list[int]:
    if not tokens:
        return []
    return labels_from_tags(tokens, tagger.tag(tokens), tagger.max_label)


# Checkpoint: UTF-8 text. Line 1 "ltlforce-tagger v1", line 2
# "max_label <n>", then one "feature<TAB>tag<TAB>weight" line per entry.
# Backslash, tab and newline inside features are written as \\, \t, \n.

_TAGGER_MAGIC = "ltlforce-tagger v1"


def _esc(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unesc(s: str) -> str:
    out = []
    i = 0
    while i < len(s):
        c = s[i]
        if c == "\\" and i + 1 < len(s):
            out.append({"\\": "\\", "t": "\t", "n": "\n"}[s[i + 1]])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def save_tagger(tagger: Tagger, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_TAGGER_MAGIC + "\n")
        fh.write(f"max_label {tagger.max_label}\n")
        for f in sorted(tagger.weights):
            for tag in sorted(tagger.weights[f]):
                fh.write(f"{_esc(f)}\t{tag}\t{tagger.weights[f][tag]!r}\n")


def load_tagger(path) -> Tagger:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines[0] != _TAGGER_MAGIC:
        raise ValueError(f"{path}: not a tagger checkpoint")
    max_label = int(lines[1].split()[1])
    weights: dict[str, dict[str, float]] = {}
    for line in lines[2:]:
        if not line:
            continue
        f, tag, w = line.split("\t")
        weights.setdefault(_unesc(f), {})[tag] = float(w)
    return Tagger(weights, max_label)
