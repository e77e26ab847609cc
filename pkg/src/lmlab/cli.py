"""Command-line front end: one binary, one subcommand per pipeline step.

Every run resolves its seed (--seed flag, then RTL_SEED, then 42), writes
its artifacts plus a frozen `config.json` into the output directory, and
keeps wall-clock timestamps out of everything except `run_meta.json` so
identical runs produce identical artifact bytes.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import bilm as bilm_mod
from . import corpus as corpus_mod
from . import domaincls as dom_mod
from . import embed as embed_mod
from . import labeler as labeler_mod
from . import lm as lm_mod
from . import numcore
from . import word2vec as w2v_mod
from .errors import ContractError, DataError

log = logging.getLogger(__name__)

DEFAULT_SEED = 42
SEED_ENV = "RTL_SEED"


class _UsageExit(Exception):
    def __init__(self, message: str):
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; this interface reserves 2 for
    # data errors, so route usage problems through exit code 1 instead
    def error(self, message):
        raise _UsageExit(f"{self.prog}: error: {message}\n{self.format_usage()}")


def resolve_seed(flag_value) -> int:
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise DataError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return DEFAULT_SEED


def _prepare_out(out_dir, config: dict) -> Path:
    """Create the output directory, freeze the resolved config next to the
    artifacts, and record the only timestamp in a separate metadata file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(config, indent=2, sort_keys=True) + "\n")
    with open(out / "run_meta.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(
            {"started_utc": datetime.now(timezone.utc).isoformat()}) + "\n")
    return out


def _load_or_build_vocab(args) -> corpus_mod.Vocab:
    if getattr(args, "vocab", None):
        return corpus_mod.load_vocab(args.vocab)
    text = corpus_mod.read_text(args.corpus)
    return corpus_mod.build_vocab(corpus_mod.tokenize(text), args.max_size,
                                  min_count=args.min_count)


def _add_vocab_opts(p):
    p.add_argument("--vocab", help="vocabulary file from the `vocab` subcommand "
                   "(default: build from --corpus)")
    p.add_argument("--max-size", type=int, default=10000,
                   help="vocabulary budget when building (default 10000)")
    p.add_argument("--min-count", type=int, default=1,
                   help="frequency cutoff when building (default 1)")


def _add_common(p):
    p.add_argument("--seed", type=int, default=None,
                   help=f"RNG seed (default: ${SEED_ENV} or {DEFAULT_SEED})")
    p.add_argument("--out", required=True, help="output directory")


# --------------------------------------------------------------------------
# subcommand handlers
# --------------------------------------------------------------------------

def _cmd_vocab(args) -> int:
    text = corpus_mod.read_text(args.corpus)
    vocab = corpus_mod.build_vocab(corpus_mod.tokenize(text), args.max_size,
                                   min_count=args.min_count)
    out = _prepare_out(args.out, {
        "subcommand": "vocab", "corpus": str(args.corpus),
        "max_size": args.max_size, "min_count": args.min_count,
    })
    corpus_mod.save_vocab(out / "vocab.txt", vocab)
    print(f"wrote {out / 'vocab.txt'} ({len(vocab.id_to_token)} tokens)")
    return 0


def _cmd_w2v(args) -> int:
    seed = resolve_seed(args.seed)
    vocab = _load_or_build_vocab(args)
    corpus = corpus_mod.encode(corpus_mod.read_text(args.corpus), vocab)
    cfg = w2v_mod.W2vConfig(dim=args.dim, window=args.window, negatives=args.negatives,
                            mode=args.mode, epochs=args.epochs,
                            learning_rate=args.learning_rate, min_count=args.min_count,
                            subsample=args.subsample, seed=seed)
    out = _prepare_out(args.out, {"subcommand": "w2v", "corpus": str(args.corpus),
                                  "vocab": args.vocab and str(args.vocab),
                                  "max_size": args.max_size, **vars(cfg)})
    table = w2v_mod.train_word2vec(corpus, cfg)
    embed_mod.save_embeddings(out / "embeddings.vec", table)
    print(f"wrote {out / 'embeddings.vec'} ({len(table.tokens)} x {table.dim})")
    return 0


def _cmd_bilm(args) -> int:
    seed = resolve_seed(args.seed)
    vocab = _load_or_build_vocab(args)
    corpus = corpus_mod.encode(corpus_mod.read_text(args.corpus), vocab)
    cfg = bilm_mod.BilmConfig(emb_dim=args.emb_dim, hidden=args.hidden,
                              compress_dim=args.compress_dim, epochs=args.epochs,
                              batch_size=args.batch_size,
                              learning_rate=args.learning_rate, clip=args.clip,
                              state_kind=args.state_kind, combine=args.combine,
                              seed=seed)
    out = _prepare_out(args.out, {"subcommand": "bilm", "corpus": str(args.corpus),
                                  "vocab": args.vocab and str(args.vocab),
                                  "max_size": args.max_size, "min_count": args.min_count,
                                  **vars(cfg)})
    model = bilm_mod.train_bilm(corpus, cfg)
    bilm_mod.save_bilm(out / "bilm.ckpt", model)
    loss = bilm_mod.mean_loss(model, corpus)
    print(f"wrote {out / 'bilm.ckpt'} (joint train loss {loss:.4f} nats/token)")
    return 0


def _cmd_label(args) -> int:
    seed = resolve_seed(args.seed)
    text = corpus_mod.read_text(args.corpus)
    blocks = corpus_mod.split_paragraph_blocks(text)
    docs = [corpus_mod.tokenize(b) for b in blocks]
    keep = [i for i, d in enumerate(docs) if d]
    docs = [docs[i] for i in keep]
    blocks = [blocks[i] for i in keep]
    if not docs:
        raise DataError(f"{args.corpus}: no non-empty paragraphs")
    out = _prepare_out(args.out, {
        "subcommand": "label", "corpus": str(args.corpus), "k": args.k,
        "tau": args.tau, "rounds": args.rounds, "d": args.d,
        "pool_factor": args.pool_factor, "seed": seed,
    })
    result = labeler_mod.iterate_labeling(docs, args.k, tau=args.tau,
                                          rounds=args.rounds, d=args.d, seed=seed,
                                          pool_factor=args.pool_factor)
    with open(out / "labeled.txt", "w", encoding="utf-8") as fh:
        fh.write(labeler_mod.format_labeled_lines(blocks, result.labels))
    with open(out / "label_stats.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({
            "rounds_run": result.rounds_run,
            "history": [vars(h) for h in result.history],
        }, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'labeled.txt'} ({len(docs)} paragraphs, k={args.k}, "
          f"{result.rounds_run} round(s))")
    return 0


def _cmd_domaincls(args) -> int:
    seed = resolve_seed(args.seed)
    vocab = _load_or_build_vocab(args)
    corpus = corpus_mod.encode_labeled(corpus_mod.read_text(args.corpus), vocab)
    cfg = dom_mod.DomainConfig(emb_dim=args.emb_dim, hidden=args.hidden,
                               compress_dim=args.compress_dim,
                               granularity=args.granularity, epochs=args.epochs,
                               learning_rate=args.learning_rate, clip=args.clip,
                               seed=seed)
    out = _prepare_out(args.out, {"subcommand": "domaincls", "corpus": str(args.corpus),
                                  "vocab": args.vocab and str(args.vocab),
                                  "max_size": args.max_size, "min_count": args.min_count,
                                  **vars(cfg)})
    model = dom_mod.train_domaincls(corpus, cfg)
    dom_mod.save_domaincls(out / "domaincls.ckpt", model)
    acc = dom_mod.unit_accuracy(model, corpus)
    print(f"wrote {out / 'domaincls.ckpt'} (train unit accuracy {acc:.3f})")
    return 0


def _cmd_embed_avg(args) -> int:
    kind = numcore.checkpoint_kind(args.model)
    if kind == "bilm":
        model = bilm_mod.load_bilm(args.model)
        corpus = corpus_mod.encode(corpus_mod.read_text(args.corpus), model.vocab)
        table = bilm_mod.bilm_embeddings(model, corpus)
    elif kind == "domaincls":
        model = dom_mod.load_domaincls(args.model)
        corpus = corpus_mod.encode(corpus_mod.read_text(args.corpus), model.vocab)
        table = dom_mod.domain_embeddings(model, corpus, granularity=args.granularity)
    else:
        raise DataError(f"{args.model}: cannot average states of a {kind!r} checkpoint")
    out = _prepare_out(args.out, {
        "subcommand": "embed-avg", "model": str(args.model),
        "corpus": str(args.corpus), "granularity": args.granularity,
        "provenance": table.provenance,
    })
    embed_mod.save_embeddings(out / "embeddings.vec", table)
    print(f"wrote {out / 'embeddings.vec'} ({len(table.tokens)} x {table.dim}, "
          f"{table.provenance})")
    return 0


def _cmd_lm_train(args) -> int:
    seed = resolve_seed(args.seed)
    vocab = _load_or_build_vocab(args)
    train = corpus_mod.encode(corpus_mod.read_text(args.corpus), vocab)
    valid = None
    if args.valid:
        valid = corpus_mod.encode(corpus_mod.read_text(args.valid), vocab)
    cfg = lm_mod.LmConfig(emb_dim=args.emb_dim, hidden=args.hidden,
                          epochs=args.epochs, batch_size=args.batch_size,
                          learning_rate=args.learning_rate, patience=args.patience,
                          clip=args.clip, seed=seed)
    if args.embeddings:
        table = embed_mod.load_embeddings(args.embeddings, provenance=args.provenance)
        if args.normalization == "unit":
            table = embed_mod.unit_normalize(table)
        elif args.normalization == "meanvar":
            table = embed_mod.mean_variance_normalize(table, mode=args.meanvar_mode)
        compression = {"auto": None, "on": True, "off": False}[args.compression]
        spec = lm_mod.InputSpec(kind="pretrained", table=table,
                                compression=compression,
                                compress_dim=args.compress_dim,
                                trainable=args.trainable)
    else:
        spec = lm_mod.InputSpec(kind="learned")
    out = _prepare_out(args.out, {
        "subcommand": "lm-train", "corpus": str(args.corpus),
        "valid": args.valid and str(args.valid),
        "vocab": args.vocab and str(args.vocab), "max_size": args.max_size,
        "min_count": args.min_count,
        "embeddings": args.embeddings and str(args.embeddings),
        "normalization": args.normalization, "meanvar_mode": args.meanvar_mode,
        "compression": args.compression, "compress_dim": args.compress_dim,
        "trainable": args.trainable, "provenance": args.provenance, **vars(cfg)})
    model = lm_mod.train_lm(train, spec, cfg, valid_corpus=valid)
    lm_mod.save_lm(out / "lm.ckpt", model)
    line = f"wrote {out / 'lm.ckpt'} (train PPL {lm_mod.perplexity(model, train):.2f}"
    if valid is not None:
        line += f", valid PPL {lm_mod.perplexity(model, valid):.2f}"
    print(line + ")")
    return 0


def _cmd_eval(args) -> int:
    model = lm_mod.load_lm(args.model)
    corpus = corpus_mod.encode(corpus_mod.read_text(args.corpus), model.vocab)
    ppl = lm_mod.perplexity(model, corpus)
    print(f"perplexity: {ppl:.6f}")
    if args.out:
        out = _prepare_out(args.out, {"subcommand": "eval", "model": str(args.model),
                                      "corpus": str(args.corpus)})
        with open(out / "eval.json", "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"perplexity": ppl, "corpus": str(args.corpus)},
                                indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_suite(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.manifest}: invalid JSON: {exc}") from None
    if args.seed is not None:
        manifest["seed"] = args.seed
    elif "seed" not in manifest:
        manifest["seed"] = resolve_seed(None)
    out = _prepare_out(args.out, {"subcommand": "suite",
                                  "manifest": str(args.manifest), **manifest})
    report = lm_mod.run_experiment_suite(manifest, progress=lambda m: print(m))
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    print(report.to_text(), end="")
    failures = [r.name for r in report.rows if r.error]
    if failures:
        print(f"rows failed: {', '.join(failures)}", file=sys.stderr)
    return 0


def _cmd_probe(args) -> int:
    model = lm_mod.load_lm(args.model)
    tokens = corpus_mod.tokenize(args.text)
    if not tokens:
        raise DataError("probe text contains no tokens")
    word_ids = [model.vocab.id_of(t) for t in tokens]
    result = lm_mod.rank_probe(model, word_ids, args.position, top_n=args.top)
    print(f"target '{result.target_token}' (p={result.target_prob:.6g}): "
          + result.headline())
    for i, (tok, p) in enumerate(result.top, start=1):
        print(f"  {i:2d}. {tok}  {p:.6g}")
    return 0


# --------------------------------------------------------------------------
# parser wiring
# --------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="lmlab",
                     description="Embedding pre-training and LSTM LM experiments.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("vocab", help="build a vocabulary from plain text")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-size", type=int, default=10000)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_vocab)

    p = sub.add_parser("w2v", help="train CBOW/skip-gram embeddings")
    p.add_argument("--corpus", required=True)
    _add_vocab_opts(p)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--mode", choices=w2v_mod.MODES, default="cbow")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--learning-rate", type=float, default=0.025)
    p.add_argument("--subsample", type=float, default=0.0)
    _add_common(p)
    p.set_defaults(func=_cmd_w2v)

    p = sub.add_parser("bilm", help="train the bidirectional LM")
    p.add_argument("--corpus", required=True)
    _add_vocab_opts(p)
    p.add_argument("--emb-dim", type=int, default=256)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--compress-dim", type=int, default=None)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--state-kind", choices=bilm_mod.STATE_KINDS, default="c")
    p.add_argument("--combine", choices=bilm_mod.COMBINE_MODES, default="concat")
    _add_common(p)
    p.set_defaults(func=_cmd_bilm)

    p = sub.add_parser("label", help="manufacture domain labels (LSA + k-means)")
    p.add_argument("--corpus", required=True, help="plain text, blank-line paragraphs")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--rounds", type=int, default=4)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--pool-factor", type=int, default=2)
    _add_common(p)
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("domaincls", help="train the bi-LSTM domain classifier")
    p.add_argument("--corpus", required=True, help="__label__ lines")
    _add_vocab_opts(p)
    p.add_argument("--emb-dim", type=int, default=256)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--compress-dim", type=int, default=None)
    p.add_argument("--granularity", choices=dom_mod.GRANULARITIES, default="paragraph")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--clip", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_domaincls)

    p = sub.add_parser("embed-avg",
                       help="average a model's contextual states per word")
    p.add_argument("--model", required=True, help="bilm or domaincls checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--granularity", choices=dom_mod.GRANULARITIES, default=None,
                   help="unit for domaincls extraction (default: training setting)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed_avg)

    p = sub.add_parser("lm-train", help="train the unidirectional LSTM LM")
    p.add_argument("--corpus", required=True)
    p.add_argument("--valid", default=None, help="validation corpus for early stopping")
    _add_vocab_opts(p)
    p.add_argument("--embeddings", default=None, help="pre-trained table (text format)")
    p.add_argument("--provenance", choices=embed_mod.PROVENANCES, default="external")
    p.add_argument("--normalization", choices=embed_mod.NORMALIZATIONS, default="none")
    p.add_argument("--meanvar-mode", choices=("std", "variance"), default="std")
    p.add_argument("--compression", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--compress-dim", type=int, default=None)
    p.add_argument("--trainable", action="store_true",
                   help="fine-tune pre-trained rows instead of freezing them")
    p.add_argument("--emb-dim", type=int, default=256)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--clip", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_lm_train)

    p = sub.add_parser("eval", help="perplexity of an LM checkpoint on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("suite", help="run a manifest of LM experiments")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_suite)

    p = sub.add_parser("probe", help="rank of the true word at one position")
    p.add_argument("--model", required=True, help="lm checkpoint")
    p.add_argument("--text", required=True)
    p.add_argument("--position", type=int, required=True,
                   help="0-based index into the text's tokens")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=_cmd_probe)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help()
            return 1
        return args.func(args)
    except _UsageExit as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ContractError as exc:
        print(f"lmlab: invalid request: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"lmlab: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"lmlab: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
