"""Command-line entry point: gen, train, embed, mine, eval, score.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import trainer as trainer_mod
from .config import ExperimentConfig, config_hash, load_config
from .corpus import generate_corpus, load_corpus_dir, read_pairs, write_corpus
from .errors import (
    AlignmentError,
    ConfigError,
    ContractError,
    DegenerateDataError,
    EmptySequenceError,
    FormatError,
    NumericalError,
    ShapeError,
    VocabularyError,
)
from .evalkit import (
    mine_pairs,
    read_embeddings,
    read_report,
    write_embeddings,
    write_report,
)
from .evalrun import embed_token_lists, evaluate_model
from .model import Model
from .objectives import OBJECTIVES
from .trainer import TrainState, TrainingConfig, train

USAGE_ERRORS = (
    ConfigError, VocabularyError, FormatError, AlignmentError, ContractError,
    DegenerateDataError, EmptySequenceError, ShapeError, FileNotFoundError,
)


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        config.corpus = dataclasses.replace(config.corpus, seed=args.seed)
        config.training = dataclasses.replace(config.training, seed=args.seed)
    if getattr(args, "objective", None) is not None:
        if args.objective not in OBJECTIVES:
            raise ConfigError(
                f"--objective {args.objective!r} not one of {OBJECTIVES}"
            )
        config.training = dataclasses.replace(config.training, objective=args.objective)
    if getattr(args, "steps", None) is not None:
        config.training = dataclasses.replace(config.training, steps=args.steps)
    return config


def cmd_gen(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out_dir = Path(args.out) if args.out else config.corpus_dir()
    corpus = generate_corpus(config.corpus)
    write_corpus(corpus, out_dir)
    if not args.quiet:
        print(f"wrote corpus ({len(corpus.train)} train pairs) to {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    sets = load_corpus_dir(config.corpus_dir())
    vocab = sets["vocab"]
    if len(vocab) != config.model.vocab_size:
        raise ConfigError(
            f"corpus vocab size {len(vocab)} != model.vocab_size "
            f"{config.model.vocab_size}; regenerate the corpus"
        )
    tcfg = config.training
    run_dir = config.checkpoint_dir() / tcfg.objective
    if args.resume:
        state = trainer_mod.load_state(args.resume)
        state.config = tcfg
    else:
        model = Model.create(config.model, seed=tcfg.seed)
        state = TrainState.init(model, tcfg)
    train(state, sets["train"], vocab, config.model.max_len,
          loss_csv=run_dir / "losses.csv", checkpoint_dir=run_dir,
          quiet=args.quiet)
    if not args.quiet:
        print(f"trained {tcfg.objective} to step {state.step}; "
              f"checkpoints in {run_dir}")
    return 0


def _load_model(path) -> Model:
    return ckpt.load_checkpoint(path).model


def cmd_embed(args) -> int:
    loaded = ckpt.load_checkpoint(args.checkpoint)
    pairs = read_pairs(args.input)
    if args.column not in ("a", "b"):
        raise ConfigError(f"--column must be 'a' or 'b', got {args.column!r}")
    token_lists = [p.tokens_a if args.column == "a" else p.tokens_b for p in pairs]

    corpus_dir = Path(args.input).parent
    vocab_path = corpus_dir / "vocab.txt" if args.vocab is None else Path(args.vocab)
    if not vocab_path.exists():
        raise ConfigError(f"vocabulary file {vocab_path} not found (use --vocab)")
    from .corpus import Vocabulary

    vocab = Vocabulary.read(vocab_path)
    if len(vocab) != loaded.model.config.vocab_size:
        raise ConfigError(
            f"vocab size {len(vocab)} != checkpoint vocab_size "
            f"{loaded.model.config.vocab_size}"
        )
    vectors = embed_token_lists(loaded.model, token_lists, vocab)
    ids = [str(i) for i in range(len(token_lists))]
    write_embeddings(args.out, vectors, ids=ids,
                     ids_path=args.ids_out if args.ids_out else None)
    if not args.quiet:
        print(f"wrote {vectors.shape[0]} x {vectors.shape[1]} embeddings to {args.out}")
    return 0


def _read_gold_tsv(path) -> list[tuple[int, int]]:
    gold = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ConfigError(f"gold file {path}: expected 2 columns per line")
        gold.append((int(fields[0]), int(fields[1])))
    return gold


def cmd_mine(args) -> int:
    src = read_embeddings(args.src)
    tgt = read_embeddings(args.tgt)
    gold = _read_gold_tsv(args.gold)
    result = mine_pairs(src, tgt, args.method, gold, k_nn=args.k_nn)
    doc = {
        "method": args.method,
        "threshold": result.threshold,
        "precision": result.precision,
        "recall": result.recall,
        "f1": result.f1,
        "pairs": [[i, j, s] for i, j, s in result.pairs],
    }
    if args.out:
        write_report(args.out, doc)
    if not args.quiet:
        print(json.dumps({k: doc[k] for k in
                          ("method", "threshold", "precision", "recall", "f1")}))
    return 0


def cmd_eval(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    sets = load_corpus_dir(config.corpus_dir())
    loaded = ckpt.load_checkpoint(args.checkpoint)
    report, full = evaluate_model(loaded.model, sets, k_nn=config.eval.k_nn,
                                  mining_methods=config.eval.mining_methods)
    full["seed"] = config.training.seed
    full["config_hash"] = config_hash(config)
    full["step"] = loaded.step
    out = Path(args.out) if args.out else config.report_path()
    write_report(out, full)
    if not args.quiet:
        print(f"overall_score {report.overall_score:.1f} -> {out}")
    return 0


def cmd_score(args) -> int:
    doc = read_report(args.report)
    from .evalkit import EvalReport, overall_score

    try:
        report = EvalReport(
            sts_english=doc["sts_english"],
            sts_crosslingual=doc["sts_crosslingual"],
            tatoeba_acc=doc["tatoeba_acc"],
            bucc_cosine_f1=doc["bucc_cosine_f1"],
            bucc_margin_f1=doc["bucc_margin_f1"],
            retrieval_r1_primary=doc["retrieval_r1_primary"],
            retrieval_r1_multilingual=doc["retrieval_r1_multilingual"],
        )
    except KeyError as e:
        raise ConfigError(f"report {args.report} missing field {e.args[0]!r}") from None
    score = overall_score(report)
    stored = doc.get("overall_score")
    if stored is not None and abs(stored - score) > 1e-9:
        raise ConfigError(
            f"report overall_score {stored} != recomputed {score}"
        )
    print(repr(score))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vmsst",
        description="Generate synthetic multilingual corpora, train "
                    "source-separation / contrastive / translation sentence "
                    "embedding objectives, and evaluate them.",
    )
    parser.add_argument("--seed", type=int, default=None,
                        help="override corpus and training seeds")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic corpus files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the corpus directory")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train one objective on the corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--objective", default=None, choices=None,
                   help=f"override training.objective ({', '.join(OBJECTIVES)})")
    p.add_argument("--steps", type=int, default=None, help="override training.steps")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="embed one side of a pair TSV into a VMSB file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="pair TSV file")
    p.add_argument("--column", default="a", help="which side to embed: a or b")
    p.add_argument("--vocab", default=None,
                   help="vocab.txt (default: alongside the input file)")
    p.add_argument("--out", required=True)
    p.add_argument("--ids-out", default=None, help="optional sidecar id file")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("mine", help="mine aligned pairs between two VMSB files")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--gold", required=True, help="TSV of gold src_idx\\ttgt_idx")
    p.add_argument("--method", default="cosine", choices=("cosine", "margin"))
    p.add_argument("--k-nn", type=int, default=4)
    p.add_argument("--out", default=None, help="write the MiningResult JSON here")
    p.set_defaults(fn=cmd_mine)

    p = sub.add_parser("eval", help="full evaluation report for a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="report path override")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("score", help="recompute the overall score of a report")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
