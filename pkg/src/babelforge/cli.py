"""Single batch-oriented executable for the whole pipeline.

Exit codes: 0 success, 1 usage error, 2 runtime error. stdout carries only
machine-readable `key=value` progress lines; diagnostics go to stderr. Every
subcommand writes a manifest.json provenance record next to its outputs, and
all randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from . import corpus as corpus_mod
from . import model as model_mod
from . import reporting
from . import trainer as trainer_mod
from . import xferlab
from .tokenizer import save_vocab, load_vocab
from .util import read_kv_file, write_manifest


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _progress(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def build_parser() -> _Parser:
    parser = _Parser(prog="babelforge", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("clean", help="langid-tag, dedup, and perplexity-filter a corpus")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep", type=float, default=0.7,
                   help="fraction kept per language, by ascending perplexity")
    p.add_argument("--langid", default=None,
                   help="optional trained langid model (.npz) to tag documents")
    p.add_argument("--lm-order", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("stats", help="per-language corpus statistics CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-langid", help="train the hashed char n-gram classifier")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ngram-min", type=int, default=1)
    p.add_argument("--ngram-max", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=2 ** 18)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-tokenizer", help="train the shared unigram vocabulary")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.3,
                   help="smoothing for the per-language sampling of training text")
    p.add_argument("--sample", type=int, default=2000,
                   help="total sentences sampled for tokenizer training")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="run the MLM pretraining loop")
    p.add_argument("--config", required=True, help="flat key=value run config")
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the seed key in the config file")

    p = sub.add_parser("probe", help="frozen-encoder topic probe on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-lang", required=True)
    p.add_argument("--test-langs", required=True, help="comma-separated codes")
    p.add_argument("--n-train", type=int, default=220)
    p.add_argument("--n-eval", type=int, default=120)
    p.add_argument("--seq-len", type=int, default=0,
                   help="0 takes seq_len from the checkpoint run config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep", help="run a languages/alpha/vocab sweep")
    p.add_argument("--spec", required=True, help="flat key=value sweep spec")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the seeds key with this single seed")

    p = sub.add_parser("report", help="render sweep curves to CSV + SVG")
    p.add_argument("--curves", nargs="+", required=True, help="curve JSON files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_clean(args) -> int:
    docs = corpus_mod.read_jsonl(args.inp)
    _progress(stage="clean", event="read", docs=len(docs))
    docs = corpus_mod.dedup(docs)
    _progress(stage="clean", event="dedup", docs=len(docs))

    dropped_all = []
    if args.langid:
        langid = corpus_mod.load_langid(args.langid)
        for doc in docs:
            lang, conf = corpus_mod.identify(langid, doc.text)
            if not doc.lang:
                doc.lang = lang
            doc.langid_conf = conf
    untagged = [d for d in docs if not d.lang]
    for doc in untagged:
        doc.drop_reason = "no-lang"
    dropped_all.extend(untagged)
    docs = [d for d in docs if d.lang]

    by_lang: dict[str, list] = {}
    for doc in docs:
        by_lang.setdefault(doc.lang, []).append(doc)
    lms = {lang: corpus_mod.train_char_lm(group, order=args.lm_order)
           for lang, group in sorted(by_lang.items())}
    kept, dropped = corpus_mod.score_and_filter(docs, lms, args.keep,
                                                jobs=args.jobs)
    dropped_all.extend(dropped)
    _progress(stage="clean", event="filter", kept=len(kept), dropped=len(dropped_all))

    corpus_mod.write_jsonl(kept, args.out)
    stats_path = os.path.splitext(args.out)[0] + ".stats.csv"
    corpus_mod.write_stats_csv(corpus_mod.compute_stats(kept), stats_path)
    write_manifest(os.path.dirname(os.path.abspath(args.out)), "clean",
                   {"in": args.inp, "out": args.out, "keep": args.keep,
                    "langid": args.langid, "lm_order": args.lm_order,
                    "jobs": args.jobs},
                   inputs=[args.inp], outputs=[args.out, stats_path],
                   seed=args.seed)
    _progress(stage="clean", event="done", out=args.out, stats=stats_path)
    return 0


def _cmd_stats(args) -> int:
    docs = corpus_mod.read_jsonl(args.inp)
    corpus_mod.write_stats_csv(corpus_mod.compute_stats(docs), args.out)
    write_manifest(os.path.dirname(os.path.abspath(args.out)), "stats",
                   {"in": args.inp, "out": args.out},
                   inputs=[args.inp], outputs=[args.out], seed=args.seed)
    _progress(stage="stats", event="done", docs=len(docs), out=args.out)
    return 0


def _cmd_train_langid(args) -> int:
    docs = corpus_mod.read_jsonl(args.inp)
    model = corpus_mod.train_langid(
        [(d.text, d.lang) for d in docs],
        ngram_range=(args.ngram_min, args.ngram_max),
        feature_dim=args.feature_dim, epochs=args.epochs, lr=args.lr,
        seed=args.seed)
    corpus_mod.save_langid(model, args.out)
    write_manifest(os.path.dirname(os.path.abspath(args.out)), "train-langid",
                   {"in": args.inp, "out": args.out,
                    "ngram_min": args.ngram_min, "ngram_max": args.ngram_max,
                    "feature_dim": args.feature_dim, "epochs": args.epochs,
                    "lr": args.lr},
                   inputs=[args.inp], outputs=[args.out], seed=args.seed)
    _progress(stage="train-langid", event="done", classes=len(model.labels),
              out=args.out)
    return 0


def _cmd_train_tokenizer(args) -> int:
    docs = corpus_mod.read_jsonl(args.inp)
    vocab = xferlab.train_tokenizer_smoothed(
        docs, alpha=args.alpha, sample_total=args.sample,
        target_v=args.vocab_size, seed=args.seed)
    save_vocab(vocab, args.out)
    write_manifest(os.path.dirname(os.path.abspath(args.out)), "train-tokenizer",
                   {"in": args.inp, "out": args.out,
                    "vocab_size": args.vocab_size, "alpha": args.alpha,
                    "sample": args.sample},
                   inputs=[args.inp], outputs=[args.out], seed=args.seed)
    _progress(stage="train-tokenizer", event="done", size=vocab.size,
              out=args.out)
    return 0


def _cmd_pretrain(args) -> int:
    raw = read_kv_file(args.config)
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    ckpt, metrics = trainer_mod.train(raw)
    _progress(stage="pretrain", event="done", ckpt=ckpt, metrics=metrics)
    return 0


def _cmd_probe(args) -> int:
    config, tensors, extra = model_mod.load_checkpoint(args.ckpt)
    params_t = {k: v for k, v in tensors.items() if not k.startswith("adam_")}
    params = model_mod.ModelParams(config, params_t)
    vocab = load_vocab(args.vocab)
    docs = corpus_mod.read_jsonl(args.corpus)
    seq_len = args.seq_len or extra.get("run_config", {}).get("seq_len", 32)

    test_langs = [l.strip() for l in args.test_langs.split(",") if l.strip()]
    sizes = {st.lang: st.n_sentences for st in corpus_mod.compute_stats(docs)}
    by_size = sorted(test_langs, key=lambda l: (-sizes.get(l, 0), l))
    hi = sorted(by_size[:2])
    lo = sorted(by_size[-2:])
    result = xferlab.probe_transfer(
        params, vocab, docs, args.train_lang, test_langs,
        n_train=args.n_train, seed=args.seed, seq_len=int(seq_len),
        n_eval=args.n_eval, hi_langs=hi, lo_langs=lo)
    payload = {"train_lang": args.train_lang, "per_lang": result.per_lang,
               "hi_langs": result.hi_langs, "lo_langs": result.lo_langs,
               "hi_avg": result.hi_avg, "lo_avg": result.lo_avg}
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    write_manifest(os.path.dirname(os.path.abspath(args.out)), "probe",
                   {"ckpt": args.ckpt, "vocab": args.vocab,
                    "corpus": args.corpus, "train_lang": args.train_lang,
                    "test_langs": args.test_langs, "n_train": args.n_train,
                    "n_eval": args.n_eval, "seq_len": seq_len},
                   inputs=[args.ckpt, args.vocab, args.corpus],
                   outputs=[args.out], seed=args.seed)
    for lang in sorted(result.per_lang):
        _progress(stage="probe", lang=lang, acc=f"{result.per_lang[lang]:.4f}")
    _progress(stage="probe", event="done", out=args.out)
    return 0


def _cmd_sweep(args) -> int:
    raw = read_kv_file(args.spec)
    if args.seed is not None:
        raw["seeds"] = str(args.seed)
    curve = xferlab.run_sweep(raw, jobs=args.jobs)
    os.makedirs(args.out_dir, exist_ok=True)
    curve_path = os.path.join(args.out_dir,
                              f"{curve.variable}_{curve.fingerprint}.json")
    xferlab.save_curve(curve, curve_path)
    paths = reporting.emit_report([curve], args.out_dir)
    write_manifest(args.out_dir, "sweep",
                   {k: str(v) for k, v in sorted(raw.items())} | {"jobs": args.jobs},
                   inputs=[args.spec], outputs=[curve_path, *paths],
                   seed=args.seed)
    _progress(stage="sweep", event="done", curve=curve_path,
              files=",".join(paths))
    return 0


def _cmd_report(args) -> int:
    curves = [xferlab.load_curve(p) for p in args.curves]
    paths = reporting.emit_report(curves, args.out_dir)
    write_manifest(args.out_dir, "report", {"curves": ",".join(args.curves)},
                   inputs=args.curves, outputs=paths, seed=args.seed)
    _progress(stage="report", event="done", files=",".join(paths))
    return 0


_COMMANDS = {
    "clean": _cmd_clean,
    "stats": _cmd_stats,
    "train-langid": _cmd_train_langid,
    "train-tokenizer": _cmd_train_tokenizer,
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"babelforge {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
