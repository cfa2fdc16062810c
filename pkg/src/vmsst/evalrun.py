"""Glue from a trained model to the full evaluation report.

Embeddings are the semantic posterior means; padded positions never affect
them, so chunked extraction is order-preserving and deterministic.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .corpus import ParallelPair, Vocabulary, tokenize
from .errors import ContractError
from .evalkit import (
    EvalReport,
    cosine,
    hubness,
    mine_pairs,
    overall_score,
    pearson,
    retrieval_r_at_1,
    tatoeba_accuracy,
)
from .model import Model

EMBED_CHUNK = 128


def embed_token_lists(model: Model, token_lists: Sequence[list[str]],
                      vocab: Vocabulary, chunk: int = EMBED_CHUNK) -> np.ndarray:
    """One embedding row per input sentence, order preserved.

    Every forward pass uses the same [chunk, max_len] shape (short final
    chunks are padded with copies of row 0 and trimmed) so identical
    sentences embed bitwise identically wherever they appear: BLAS kernels
    are shape-dependent, equal shapes keep per-row arithmetic fixed."""
    rows = []
    max_len = model.config.max_len
    for start in range(0, len(token_lists), chunk):
        group = token_lists[start : start + chunk]
        n = len(group)
        ids = [tokenize(toks, vocab, max_len) for toks in group]
        tokens = np.zeros((chunk, max_len), dtype=np.int64)
        mask = np.zeros((chunk, max_len), dtype=np.float32)
        for i in range(chunk):
            r = ids[i] if i < n else ids[0]
            tokens[i, : len(r)] = r
            mask[i, : len(r)] = 1.0
        rows.append(model.embed_sentences(tokens, mask)[:n])
    return np.concatenate(rows, axis=0)


def embed_pairs_side(model: Model, pairs: Sequence[ParallelPair],
                     vocab: Vocabulary, side: str) -> np.ndarray:
    if side not in ("a", "b"):
        raise ContractError(f"side must be 'a' or 'b', got {side!r}")
    lists = [p.tokens_a if side == "a" else p.tokens_b for p in pairs]
    return embed_token_lists(model, lists, vocab)


def _sts_pearson(model: Model, pairs: Sequence[ParallelPair],
                 vocab: Vocabulary) -> float:
    emb_a = embed_pairs_side(model, pairs, vocab, "a")
    emb_b = embed_pairs_side(model, pairs, vocab, "b")
    preds = [cosine(emb_a[i], emb_b[i]) for i in range(len(pairs))]
    gold = [p.gold_similarity for p in pairs]
    if any(g is None for g in gold):
        raise ContractError("sts pairs must carry gold_similarity")
    return pearson(preds, gold)


def tatoeba_by_language(model: Model, pairs: Sequence[ParallelPair],
                        vocab: Vocabulary) -> dict[int, dict]:
    """Per-target-language bidirectional accuracy on same-language pools."""
    emb_a = embed_pairs_side(model, pairs, vocab, "a")
    emb_b = embed_pairs_side(model, pairs, vocab, "b")
    out: dict[int, dict] = {}
    langs = sorted({p.lang_b for p in pairs})
    for lang in langs:
        rows = [i for i, p in enumerate(pairs) if p.lang_b == lang]
        if len(rows) < 2:
            continue
        fwd, bwd, mean = tatoeba_accuracy(emb_a[rows], emb_b[rows])
        out[lang] = {"n": len(rows), "forward": fwd, "backward": bwd, "mean": mean}
    return out


def evaluate_model(model: Model, sets: dict, k_nn: int = 4,
                   mining_methods: Sequence[str] = ("cosine", "margin"),
                   ) -> tuple[EvalReport, dict]:
    """Compute every subtask on the generated evaluation sets.

    sets: as returned by corpus.load_corpus_dir (or a Corpus's fields);
    requires keys sts, mining, retrieval_primary, retrieval_multilingual,
    vocab. Returns the EvalReport (x100 scale) and a full report dict with
    per-language and diagnostic extras.
    """
    for key in ("sts", "mining", "retrieval_primary", "retrieval_multilingual", "vocab"):
        if key not in sets:
            raise ContractError(f"evaluation set {key!r} missing")
    vocab: Vocabulary = sets["vocab"]

    sts_pairs = sets["sts"]
    same = [p for p in sts_pairs if p.lang_a == p.lang_b]
    cross = [p for p in sts_pairs if p.lang_a != p.lang_b]
    if len(same) < 2 or len(cross) < 2:
        raise ContractError("sts set needs same-language and cross-language pairs")
    sts_english = 100.0 * _sts_pearson(model, same, vocab)
    sts_crosslingual = 100.0 * _sts_pearson(model, cross, vocab)

    mining_pairs = sets["mining"]
    src = embed_pairs_side(model, mining_pairs, vocab, "a")
    tgt = embed_pairs_side(model, mining_pairs, vocab, "b")
    fwd, bwd, tat_mean = tatoeba_accuracy(src, tgt)
    gold = [(i, i) for i in range(len(mining_pairs))]
    mining_results = {}
    for method in mining_methods:
        mining_results[method] = mine_pairs(src, tgt, method, gold, k_nn=k_nn)
    if "cosine" not in mining_results or "margin" not in mining_results:
        raise ContractError("evaluate_model needs both cosine and margin mining")
    bucc_cosine = 100.0 * mining_results["cosine"].f1
    bucc_margin = 100.0 * mining_results["margin"].f1

    def _r1(pairs):
        q = embed_pairs_side(model, pairs, vocab, "a")
        kb = embed_pairs_side(model, pairs, vocab, "b")
        return 100.0 * retrieval_r_at_1(q, kb, np.arange(len(pairs)))

    r1_primary = _r1(sets["retrieval_primary"])
    r1_multi = _r1(sets["retrieval_multilingual"])

    report = EvalReport(
        sts_english=sts_english,
        sts_crosslingual=sts_crosslingual,
        tatoeba_acc=100.0 * tat_mean,
        bucc_cosine_f1=bucc_cosine,
        bucc_margin_f1=bucc_margin,
        retrieval_r1_primary=r1_primary,
        retrieval_r1_multilingual=r1_multi,
    )
    report.overall_score = overall_score(report)

    _, skew_src = hubness(src, k_nn=min(k_nn, len(mining_pairs) - 1))
    _, skew_tgt = hubness(tgt, k_nn=min(k_nn, len(mining_pairs) - 1))
    full = {
        "sts_english": report.sts_english,
        "sts_crosslingual": report.sts_crosslingual,
        "tatoeba_acc": report.tatoeba_acc,
        "tatoeba_forward": 100.0 * fwd,
        "tatoeba_backward": 100.0 * bwd,
        "bucc_cosine_f1": report.bucc_cosine_f1,
        "bucc_margin_f1": report.bucc_margin_f1,
        "retrieval_r1_primary": report.retrieval_r1_primary,
        "retrieval_r1_multilingual": report.retrieval_r1_multilingual,
        "overall_score": report.overall_score,
        "tatoeba_by_language": {
            str(lang): stats
            for lang, stats in tatoeba_by_language(model, mining_pairs, vocab).items()
        },
        "mining": {
            method: {
                "threshold": res.threshold,
                "precision": res.precision,
                "recall": res.recall,
                "f1": res.f1,
            }
            for method, res in mining_results.items()
        },
        "hubness": {"skewness_src": skew_src, "skewness_tgt": skew_tgt},
    }
    return report, full
