"""End-to-end pipeline, evaluation metrics and experiment reports."""

from __future__ import annotations

import csv
import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ltlforce.datagen import DOMAINS, GenConfig, gen_corpus
from ltlforce.decode import ParseFailure, translate_batch
from ltlforce.grammar import Grammar
from ltlforce.lifting import (
    LiftedExample,
    MissingAP,
    Tagger,
    canonical_ap,
    lift,
    predict_labels,
    train_tagger,
    unlift,
)
from ltlforce.ltl import Formula, props_of, relabel, render
from ltlforce.losses import grad_second_moment
from ltlforce.model import (
    GRAMMAR_FORCED,
    MODES,
    STANDARD,
    ModelDims,
    ModelParams,
    SourceVocab,
    TrainConfig,
    init_model,
    loss_and_grad,
    prepare_batch,
    train,
)

SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "seed": 0,
    "seeds": [0, 1, 2],
    "domains": ["blocks", "grid", "robot"],
    "count": 500,
    "test_count": 1000,
    "ood_count_per_domain": 250,
    "ood_test_count": 500,
    "max_depth": 3,
    "max_aps": 5,
    "max_props": 5,
    "coref_prob": 0.2,
    "skeleton_prob": 0.3,
    "learning_rate": 0.5,
    "epochs": 100,
    "batch_size": 16,
    "d_emb": 32,
    "d_hidden": 64,
    "max_len": 64,
    "mode": GRAMMAR_FORCED,
    "tagger_epochs": 8,
    "variance_batches": 32,
    "variance_draws": 5,
}


def merged_config(*layers: dict | None) -> dict:
    cfg = dict(DEFAULT_CONFIG)
    for layer in layers:
        for k, v in (layer or {}).items():
            if v is None:
                continue
            if k not in DEFAULT_CONFIG:
                raise KeyError(f"unknown config key {k!r}")
            cfg[k] = v
    return cfg


def data_seed(seed: int, domain: str, split: str) -> int:
    """Distinct, stable generator seed per (seed, domain, split)."""
    return zlib.crc32(f"{seed}/{domain}/{split}".encode()) & 0x7FFFFFFF


def domain_corpus(cfg: dict, domain: str, split: str, count: int, seed: int | None = None) -> list[LiftedExample]:
    s = cfg["seed"] if seed is None else seed
    return gen_corpus(GenConfig(
        seed=data_seed(s, domain, split), count=count, max_depth=cfg["max_depth"],
        max_aps=cfg["max_aps"], domain=domain, coref_prob=cfg["coref_prob"],
        skeleton_prob=cfg["skeleton_prob"],
    ))


def train_config(cfg: dict, seed: int | None = None, mode: str | None = None) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        seed=cfg["seed"] if seed is None else seed, mode=mode or cfg["mode"],
        d_emb=cfg["d_emb"], d_hidden=cfg["d_hidden"], max_len=cfg["max_len"],
    )


def _words(text: str) -> list[str]:
    return text.split()


@dataclass(frozen=True)
class TranslationResult:
    labels: list[int]
    lifted_nl: str
    ap_map: dict[int, str]
    lifted_tl: Formula | ParseFailure
    grounded_tl: str | None
    error: str | None = None


@dataclass(frozen=True)
class Translator:
    params: ModelParams
    src_vocab: SourceVocab
    grammar: Grammar
    max_len: int = 64

    def encode(self, lifted_nl: str) -> list[int]:
        return self.src_vocab.encode(_words(lifted_nl))

    def translate_lifted(self, lifted: Sequence[str], constrained: bool = True) -> list[Formula | ParseFailure]:
        srcs = [self.encode(s) for s in lifted]
        return translate_batch(self.params, srcs, constrained, self.max_len, self.grammar)

    def translate(self, tagger: Tagger, tokens: Sequence[str], constrained: bool = True) -> TranslationResult:
        labels = predict_labels(tagger, tokens)
        lifted_nl, ap_map = lift(tokens, labels)
        out = self.translate_lifted([lifted_nl], constrained)[0]
        if isinstance(out, ParseFailure):
            return TranslationResult(labels, lifted_nl, ap_map, out, None, str(out))
        try:
            grounded = unlift(out, ap_map, ascii=True)
        except MissingAP as err:
            return TranslationResult(labels, lifted_nl, ap_map, out, None, str(err))
        return TranslationResult(labels, lifted_nl, ap_map, out, grounded)


class PropOutOfRange(ValueError):
    def __init__(self, record: int, index: int, max_props: int):
        super().__init__(f"record {record}: prop_{index} exceeds max_props={max_props}")
        self.record = record


def make_pairs(corpus: Sequence[LiftedExample], src_vocab: SourceVocab, grammar: Grammar):
    max_props = grammar.vocab.max_props
    pairs = []
    for i, ex in enumerate(corpus):
        top = max(props_of(ex.lifted_tl))
        if top > max_props:
            raise PropOutOfRange(i, top, max_props)
        pairs.append((src_vocab.encode(_words(ex.lifted_nl)), grammar.vocab.encode(ex.lifted_tl)))
    return pairs


def fit_translator(corpus: Sequence[LiftedExample], tcfg: TrainConfig, max_props: int,
                   callback=None) -> tuple[Translator, list[float]]:
    grammar = Grammar(max_props)
    src_vocab = SourceVocab.build(_words(ex.lifted_nl) for ex in corpus)
    pairs = make_pairs(corpus, src_vocab, grammar)
    params, curve = train(pairs, tcfg, grammar, len(src_vocab), callback=callback)
    return Translator(params, src_vocab, grammar, tcfg.max_len), curve


@dataclass(frozen=True)
class UngroundedTranslator:
    """Baseline without lifting: raw NL in, grounded formula out.

    Every grounded AP name seen in training becomes one prop id, so APs
    absent from the training corpus can never be produced.
    """

    params: ModelParams
    src_vocab: SourceVocab
    grammar: Grammar
    names: tuple[str, ...]
    max_len: int = 64

    def translate_raw(self, sentences: Sequence[Sequence[str]], constrained: bool = True) -> list[str | None]:
        srcs = [self.src_vocab.encode(toks) for toks in sentences]
        outs = translate_batch(self.params, srcs, constrained, self.max_len, self.grammar)
        names = dict(enumerate(self.names, 1))
        return [None if isinstance(o, ParseFailure) else render(o, ascii=True, names=names) for o in outs]


def ungrounded_names(corpus: Sequence[LiftedExample]) -> tuple[str, ...]:
    return tuple(sorted({canonical_ap(v) for ex in corpus for v in ex.ap_map.values()}))


def fit_ungrounded(corpus: Sequence[LiftedExample], tcfg: TrainConfig,
                   names: Sequence[str] | None = None) -> tuple[UngroundedTranslator, list[float]]:
    names = tuple(names) if names is not None else ungrounded_names(corpus)
    index = {n: i + 1 for i, n in enumerate(names)}
    grammar = Grammar(len(names))
    src_vocab = SourceVocab.build(ex.tokens for ex in corpus)
    pairs = []
    for ex in corpus:
        mapping = {i: index[canonical_ap(ex.ap_map[i])] for i in ex.ap_map}
        pairs.append((src_vocab.encode(ex.tokens), grammar.vocab.encode(relabel(ex.lifted_tl, mapping))))
    params, curve = train(pairs, tcfg, grammar, len(src_vocab))
    return UngroundedTranslator(params, src_vocab, grammar, names, tcfg.max_len), curve


def evaluate_ungrounded(model: UngroundedTranslator, corpus: Sequence[LiftedExample],
                        constrained: bool = True) -> dict:
    if not corpus:
        raise ValueError("empty evaluation corpus")
    outs = model.translate_raw([ex.tokens for ex in corpus], constrained)
    return {
        "n": len(corpus),
        "constrained": constrained,
        "grounded_accuracy": float(np.mean([o == ex.grounded_tl for o, ex in zip(outs, corpus)])),
        "validity_rate": float(np.mean([o is not None for o in outs])),
    }


def evaluate(translator: Translator, corpus: Sequence[LiftedExample], tagger: Tagger | None = None,
             constrained: bool = True) -> dict:
    """Exact-match metrics over a test corpus.

    ``lifted_accuracy`` uses gold lifting; ``end_to_end_accuracy`` and
    ``lifting_accuracy`` need a tagger and are None without one.
    """
    if not corpus:
        raise ValueError("empty evaluation corpus")
    outs = translator.translate_lifted([ex.lifted_nl for ex in corpus], constrained)
    valid = [not isinstance(o, ParseFailure) for o in outs]
    lifted_ok = [v and o == ex.lifted_tl for v, o, ex in zip(valid, outs, corpus)]
    metrics = {
        "n": len(corpus),
        "constrained": constrained,
        "lifted_accuracy": float(np.mean(lifted_ok)),
        "validity_rate": float(np.mean(valid)),
        "end_to_end_accuracy": None,
        "lifting_accuracy": None,
    }
    if tagger is not None:
        pred_labels = [predict_labels(tagger, ex.tokens) for ex in corpus]
        metrics["lifting_accuracy"] = float(np.mean([p == ex.labels for p, ex in zip(pred_labels, corpus)]))
        lifted = [lift(ex.tokens, p) for p, ex in zip(pred_labels, corpus)]
        e2e_outs = translator.translate_lifted([nl for nl, _ in lifted], constrained)
        hits = []
        for (_, ap_map), o, ex in zip(lifted, e2e_outs, corpus):
            if isinstance(o, ParseFailure):
                hits.append(False)
                continue
            try:
                hits.append(unlift(o, ap_map, ascii=True) == ex.grounded_tl)
            except MissingAP:
                hits.append(False)
        metrics["end_to_end_accuracy"] = float(np.mean(hits))
    return metrics


def gradient_second_moments(params: ModelParams, pairs, grammar: Grammar, n_batches: int,
                            batch_size: int, seed: int) -> dict[str, float]:
    """Batch-mean squared gradient norm under both losses on shared batches."""
    rng = np.random.default_rng(seed)
    grads: dict[str, list[np.ndarray]] = {m: [] for m in MODES}
    cache: dict = {}
    for _ in range(n_batches):
        idx = rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)
        batch = [pairs[i] for i in idx]
        for mode in MODES:
            g, _ = loss_and_grad(params, prepare_batch(batch, mode, grammar, cache))
            grads[mode].append(g)
    return {m: grad_second_moment(v) for m, v in grads.items()}


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    rows: list[dict] = field(default_factory=list)
    curves: dict[str, list[float]] = field(default_factory=dict)
    grad_second_moment: dict[str, float] = field(default_factory=dict)
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "config": self.config,
            "rows": self.rows,
            "curves": self.curves,
            "grad_second_moment": self.grad_second_moment,
            "wall_seconds": self.wall_seconds,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_csv(self, path) -> None:
        keys: list[str] = []
        for r in self.rows:
            keys.extend(k for k in r if k not in keys)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)


def write_loss_csv(path, curve: Sequence[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])


def run_in_domain(cfg: dict, domain: str | None = None) -> ExperimentReport:
    """Both modes per seed on one domain; same data and init for the pair."""
    t0 = time.perf_counter()
    domain = domain or cfg["domains"][0]
    rep = ExperimentReport("in_domain", dict(cfg, domain=domain))
    for seed in cfg["seeds"]:
        tr = domain_corpus(cfg, domain, "train", cfg["count"], seed)
        te = domain_corpus(cfg, domain, "test", cfg["test_count"], seed)
        for mode in MODES:
            start = time.perf_counter()
            tr_model, curve = fit_translator(tr, train_config(cfg, seed, mode), cfg["max_props"])
            m = evaluate(tr_model, te)
            rep.rows.append({"seed": seed, "mode": mode, "domain": domain,
                             "step0_loss": curve[0], "final_loss": curve[-1],
                             "lifted_accuracy": m["lifted_accuracy"], "validity_rate": m["validity_rate"],
                             "train_seconds": time.perf_counter() - start})
            rep.curves[f"{mode}/seed{seed}"] = curve
    rep.wall_seconds = time.perf_counter() - t0
    return rep


def run_ood(cfg: dict) -> ExperimentReport:
    """Train on two domains, evaluate on all three, for every held-out choice.

    Rows form a grid of seed x held-out domain x mode x eval domain.
    """
    t0 = time.perf_counter()
    domains = list(cfg["domains"])
    if len(domains) != 3 or any(d not in DOMAINS for d in domains):
        raise ValueError("OOD experiment needs exactly three known domains")
    rep = ExperimentReport("ood", cfg)
    for seed in cfg["seeds"]:
        tests = {d: domain_corpus(cfg, d, "test", cfg["ood_test_count"], seed) for d in domains}
        for held in domains:
            train_domains = [d for d in domains if d != held]
            tr = [ex for d in train_domains for ex in domain_corpus(cfg, d, "train", cfg["ood_count_per_domain"], seed)]
            # interleave deterministically so neither domain forms a block
            tr = [tr[i] for i in np.random.default_rng(seed).permutation(len(tr))]
            tagger = train_tagger(tr, epochs=cfg["tagger_epochs"], seed=seed, max_label=cfg["max_props"])
            for mode in MODES:
                model, curve = fit_translator(tr, train_config(cfg, seed, mode), cfg["max_props"])
                rep.curves[f"{mode}/seed{seed}/heldout-{held}"] = curve
                for d in domains:
                    m = evaluate(model, tests[d], tagger)
                    rep.rows.append({"seed": seed, "held_out": held, "mode": mode, "eval_domain": d,
                                     "is_held_out": d == held, "lifted_accuracy": m["lifted_accuracy"],
                                     "end_to_end_accuracy": m["end_to_end_accuracy"],
                                     "lifting_accuracy": m["lifting_accuracy"],
                                     "validity_rate": m["validity_rate"]})
    rep.wall_seconds = time.perf_counter() - t0
    return rep


def ood_table(rep: ExperimentReport, seed: int | None = None, metric: str = "lifted_accuracy") -> str:
    """Grid with one line per (held-out, mode) and one column per eval domain."""
    rows = [r for r in rep.rows if seed is None or r["seed"] == seed]
    domains = list(dict.fromkeys(r["eval_domain"] for r in rows))
    lines = ["held_out  mode            " + "  ".join(f"{d:>8}" for d in domains)]
    for held in dict.fromkeys(r["held_out"] for r in rows):
        for mode in MODES:
            cells = []
            for d in domains:
                vals = [r[metric] for r in rows if r["held_out"] == held and r["mode"] == mode and r["eval_domain"] == d]
                cell = f"{np.mean(vals):8.3f}" if vals else " " * 8
                cells.append(cell + ("*" if d == held else " "))
            lines.append(f"{held:<9} {mode:<15} " + " ".join(cells))
    return "\n".join(lines)


def ood_heldout_by_seed(rep: ExperimentReport, metric: str = "lifted_accuracy") -> dict[int, dict[str, float]]:
    """Mean held-out-domain accuracy per seed and mode."""
    out: dict[int, dict[str, float]] = {}
    for seed in dict.fromkeys(r["seed"] for r in rep.rows):
        out[seed] = {
            mode: float(np.mean([r[metric] for r in rep.rows
                                 if r["seed"] == seed and r["mode"] == mode and r["is_held_out"]]))
            for mode in MODES
        }
    return out


def variance_report(cfg: dict, domain: str | None = None) -> ExperimentReport:
    domain = domain or cfg["domains"][0]
    t0 = time.perf_counter()
    corpus = domain_corpus(cfg, domain, "train", cfg["count"])
    grammar = Grammar(cfg["max_props"])
    src_vocab = SourceVocab.build(_words(ex.lifted_nl) for ex in corpus)
    pairs = make_pairs(corpus, src_vocab, grammar)
    dims = ModelDims(len(src_vocab), grammar.vocab.size, cfg["d_emb"], cfg["d_hidden"])
    rep = ExperimentReport("variance", dict(cfg, domain=domain))
    for draw in range(cfg["variance_draws"]):
        params = init_model(dims, cfg["seed"] + draw)
        m = gradient_second_moments(params, pairs, grammar, cfg["variance_batches"], cfg["batch_size"], draw)
        rep.rows.append({"draw": draw, STANDARD: m[STANDARD], GRAMMAR_FORCED: m[GRAMMAR_FORCED]})
    rep.grad_second_moment = {m: float(np.mean([r[m] for r in rep.rows])) for m in MODES}
    rep.wall_seconds = time.perf_counter() - t0
    return rep


def formula_text(f: Formula | ParseFailure, ascii: bool = False) -> str:
    return str(f) if isinstance(f, ParseFailure) else render(f, ascii=ascii)
