"""Command line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data-contract violation,
3 internal invariant failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ltlforce.datagen import corpus_stats, read_jsonl, write_jsonl
from ltlforce.decode import ParseFailure
from ltlforce.grammar import Grammar
from ltlforce.harness import (
    DEFAULT_CONFIG,
    ExperimentReport,
    PropOutOfRange,
    Translator,
    UngroundedTranslator,
    domain_corpus,
    evaluate,
    evaluate_ungrounded,
    fit_translator,
    fit_ungrounded,
    formula_text,
    merged_config,
    ood_heldout_by_seed,
    ood_table,
    run_ood,
    train_config,
    write_loss_csv,
)
from ltlforce.lifting import (
    LabelError,
    MissingAP,
    lift,
    load_tagger,
    predict_labels,
    save_tagger,
    train_tagger,
    unlift,
)
from ltlforce.losses import TargetNotValid
from ltlforce.ltl import FormulaSyntaxError
from ltlforce.model import MODES, LengthExceeded, UnparseableTarget, load_checkpoint, save_checkpoint
from ltlforce import properties

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class InvariantError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> dict:
    layer = {}
    if getattr(args, "config", None):
        try:
            layer = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as err:
            raise UsageError(f"cannot read config: {err}") from err
        except json.JSONDecodeError as err:
            raise UsageError(f"{args.config}: invalid JSON: {err}") from err
        if not isinstance(layer, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
    flags = {k: getattr(args, k, None) for k in DEFAULT_CONFIG}
    try:
        cfg = merged_config(layer, flags)
    except KeyError as err:
        raise UsageError(str(err.args[0])) from err
    if cfg["mode"] not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    return cfg


def _read_corpus(path):
    try:
        return read_jsonl(path)
    except OSError as err:
        raise UsageError(f"cannot read corpus: {err}") from err
    except (ValueError, KeyError, TypeError, FormulaSyntaxError) as err:
        raise DataError(f"{path}: malformed corpus record: {err!r}") from err


def _tokens(text: str) -> list[str]:
    return text.split()


def cmd_datagen(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = {}
    for domain in cfg["domains"]:
        corpus = domain_corpus(cfg, domain, args.split, cfg["count"])
        write_jsonl(out / f"{domain}.{args.split}.jsonl", corpus)
        stats[domain] = corpus_stats(corpus)
    print(json.dumps({"config": cfg, "split": args.split, "stats": stats}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = [ex for p in args.corpus for ex in _read_corpus(p)]
    if not corpus:
        raise DataError("training corpus is empty")
    tcfg = train_config(cfg)
    try:
        if args.ungrounded:
            model, curve = fit_ungrounded(corpus, tcfg)
        else:
            model, curve = fit_translator(corpus, tcfg, cfg["max_props"])
    except (TargetNotValid, UnparseableTarget, LengthExceeded, PropOutOfRange) as err:
        raise DataError(f"training aborted: {err}") from err
    extra = {"config": cfg}
    if args.ungrounded:
        extra["ungrounded_names"] = list(model.names)
    save_checkpoint(args.out, model.params, model.src_vocab, model.grammar.vocab.max_props, tcfg.seed, tcfg.mode,
                    extra=extra)
    if args.loss_csv:
        write_loss_csv(args.loss_csv, curve)
    if args.tagger_out:
        save_tagger(train_tagger(corpus, epochs=cfg["tagger_epochs"], seed=cfg["seed"], max_label=cfg["max_props"]),
                    args.tagger_out)
    print(json.dumps({"mode": tcfg.mode, "steps": len(curve), "step0_loss": curve[0], "final_loss": curve[-1]}))
    return EXIT_OK


def _load_translator(path) -> Translator | UngroundedTranslator:
    try:
        params, vocab, header = load_checkpoint(path)
    except OSError as err:
        raise UsageError(f"cannot read checkpoint: {err}") from err
    except ValueError as err:
        raise DataError(str(err)) from err
    extra = header.get("extra", {})
    max_len = extra.get("config", {}).get("max_len", DEFAULT_CONFIG["max_len"])
    grammar = Grammar(header["max_props"])
    if "ungrounded_names" in extra:
        return UngroundedTranslator(params, vocab, grammar, tuple(extra["ungrounded_names"]), max_len)
    return Translator(params, vocab, grammar, max_len)


def _load_tagger(path):
    try:
        return load_tagger(path)
    except OSError as err:
        raise UsageError(f"cannot read tagger: {err}") from err
    except (ValueError, IndexError, KeyError) as err:
        raise DataError(f"{path}: malformed tagger checkpoint: {err}") from err


def cmd_lift(args) -> int:
    if args.train:
        cfg = _load_config(args)
        corpus = [ex for p in args.train for ex in _read_corpus(p)]
        if not args.out:
            raise UsageError("--train needs --out")
        save_tagger(train_tagger(corpus, epochs=cfg["tagger_epochs"], seed=cfg["seed"], max_label=cfg["max_props"]),
                    args.out)
        print(f"tagger written to {args.out}")
        return EXIT_OK
    if not (args.tagger and args.sentence):
        raise UsageError("lift needs either --train/--out or --tagger and a sentence")
    tagger = _load_tagger(args.tagger)
    tokens = _tokens(args.sentence)
    labels = predict_labels(tagger, tokens)
    lifted_nl, ap_map = lift(tokens, labels)
    print(json.dumps({"tokens": tokens, "labels": labels, "lifted_nl": lifted_nl,
                      "ap_map": {str(k): v for k, v in ap_map.items()}}, ensure_ascii=False))
    return EXIT_OK


def cmd_translate(args) -> int:
    translator = None
    if args.checkpoint and not args.lift_only:
        translator = _load_translator(args.checkpoint)
        if isinstance(translator, UngroundedTranslator):
            out = translator.translate_raw([_tokens(args.sentence)], constrained=not args.unconstrained)[0]
            print("grounded:   " + (out if out is not None else "ParseFailure"))
            return EXIT_OK
    if not args.tagger:
        raise UsageError("translate needs --tagger unless the checkpoint is ungrounded")
    tagger = _load_tagger(args.tagger)
    tokens = _tokens(args.sentence)
    labels = predict_labels(tagger, tokens)
    lifted_nl, ap_map = lift(tokens, labels)
    print("labels:     " + " ".join(map(str, labels)))
    print("lifted NL:  " + lifted_nl)
    if args.lift_only:
        return EXIT_OK
    if translator is None:
        raise UsageError("translate needs --checkpoint unless --lift-only is given")
    res = translator.translate(tagger, tokens, constrained=not args.unconstrained)
    print("lifted TL:  " + formula_text(res.lifted_tl))
    if isinstance(res.lifted_tl, ParseFailure):
        print("ParseFailure: " + str(res.lifted_tl))
        return EXIT_OK
    if res.grounded_tl is None:
        print("MissingAP: " + (res.error or ""))
        return EXIT_DATA
    print("grounded:   " + unlift(res.lifted_tl, res.ap_map))
    return EXIT_OK


def cmd_eval(args) -> int:
    translator = _load_translator(args.checkpoint)
    tagger = _load_tagger(args.tagger) if args.tagger else None
    corpus = _read_corpus(args.corpus)
    if not corpus:
        raise DataError("evaluation corpus is empty")
    constrained = not args.unconstrained
    if isinstance(translator, UngroundedTranslator):
        m = evaluate_ungrounded(translator, corpus, constrained)
    else:
        m = evaluate(translator, corpus, tagger, constrained)
    if constrained and m["validity_rate"] != 1.0:
        raise InvariantError(f"constrained decoding produced invalid output (validity {m['validity_rate']})")
    rep = ExperimentReport("eval", {"checkpoint": str(args.checkpoint), "corpus": str(args.corpus),
                                    "tagger": str(args.tagger), "constrained": constrained},
                           rows=[dict(m, corpus=str(args.corpus))])
    if args.out:
        rep.write_json(args.out)
    if args.csv:
        rep.write_csv(args.csv)
    print(json.dumps(m, sort_keys=True))
    return EXIT_OK


def cmd_experiment_ood(args) -> int:
    cfg = _load_config(args)
    rep = run_ood(cfg)
    for row in rep.rows:
        for k in ("lifted_accuracy", "end_to_end_accuracy", "lifting_accuracy", "validity_rate"):
            if row[k] is not None and not 0.0 <= row[k] <= 1.0:
                raise InvariantError(f"{k} outside [0, 1]: {row[k]}")
        if row["validity_rate"] != 1.0:
            raise InvariantError("constrained decoding produced invalid output")
    if args.out:
        rep.write_json(args.out)
    if args.csv:
        rep.write_csv(args.csv)
    print(ood_table(rep))
    print()
    for seed, accs in ood_heldout_by_seed(rep).items():
        print(f"seed {seed}: held-out lifted accuracy " + "  ".join(f"{m}={a:.3f}" for m, a in accs.items()))
    return EXIT_OK


def cmd_property_suite(args) -> int:
    results = properties.run_all()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.detail}  ({r.seconds:.1f}s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT


def _add_config_flags(p, train=False):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    if train:
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--epochs", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--max-props", dest="max_props", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ltlforce", description="NL to LTL translation with grammar-constrained decoding.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate synthetic domain corpora")
    _add_config_flags(p)
    p.add_argument("--count", type=int)
    p.add_argument("--domains", nargs="+")
    p.add_argument("--split", default="train", help="name mixed into the data seed (train/test/...)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a translation model")
    _add_config_flags(p, train=True)
    p.add_argument("corpus", nargs="+", help="JSONL corpus file(s)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", help="per-step loss curve (step,loss)")
    p.add_argument("--tagger-out", help="also train and save a lifting tagger")
    p.add_argument("--ungrounded", action="store_true",
                   help="baseline without lifting: raw sentence to grounded formula")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="lift, translate and ground one sentence")
    p.add_argument("sentence")
    p.add_argument("--checkpoint")
    p.add_argument("--tagger")
    p.add_argument("--unconstrained", action="store_true", help="plain greedy decoding; may fail to parse")
    p.add_argument("--lift-only", action="store_true", help="stop after lifting")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("lift", help="train a tagger or label a sentence")
    _add_config_flags(p)
    p.add_argument("sentence", nargs="?")
    p.add_argument("--tagger")
    p.add_argument("--train", nargs="+", help="JSONL corpus file(s) to train on")
    p.add_argument("--out", help="tagger output path")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tagger")
    p.add_argument("--unconstrained", action="store_true")
    p.add_argument("--out", help="report JSON")
    p.add_argument("--csv", help="report CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment-ood", help="train on two domains, evaluate on all three")
    _add_config_flags(p, train=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", help="report JSON")
    p.add_argument("--csv", help="grid CSV")
    p.set_defaults(func=cmd_experiment_ood)

    p = sub.add_parser("property-suite", help="run fast correctness checks")
    p.set_defaults(func=cmd_property_suite)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"ltlforce: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LabelError, MissingAP) as err:
        print(f"ltlforce: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as err:
        print(f"ltlforce: invariant failure: {err}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ValueError, TypeError) as err:
        # config values rejected by dataclass validation
        print(f"ltlforce: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
