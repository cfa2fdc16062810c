"""Embedding-space evaluation: correlations, bidirectional retrieval accuracy,
mining with cosine and margin scoring plus optimal-F1 thresholding, R@1
retrieval, hubness diagnostics, and the six-subtask overall score.

All nearest-neighbor work is exact and O(n^2). Pairwise scores are computed
per pair from elementary dot products (not one fused matrix multiply) so
results match a brute-force oracle bit for bit; neighbor sums accumulate in
ascending score order for the same reason.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    ContractError,
    DegenerateDataError,
    FormatError,
)

VMSB_MAGIC = b"VMSB"


@dataclass
class EmbeddingMatrix:
    vectors: np.ndarray
    ids: Optional[list[str]] = None

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class MiningResult:
    pairs: list[tuple[int, int, float]]
    threshold: float
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    sts_english: float
    sts_crosslingual: float
    tatoeba_acc: float
    bucc_cosine_f1: float
    bucc_margin_f1: float
    retrieval_r1_primary: float
    retrieval_r1_multilingual: float
    overall_score: Optional[float] = None


# ---------------- elementary scores ----------------


def _as2d(x) -> np.ndarray:
    arr = x.vectors if isinstance(x, EmbeddingMatrix) else np.asarray(x)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ContractError(f"expected a non-empty [n, k] matrix, got shape {arr.shape}")
    return arr


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.sqrt(np.dot(u, u))
    nv = np.sqrt(np.dot(v, v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateDataError("cosine of a zero vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosines, one elementary dot product per pair."""
    a, b = _as2d(a), _as2d(b)
    na = np.array([np.sqrt(np.dot(row, row)) for row in a])
    nb = np.array([np.sqrt(np.dot(row, row)) for row in b])
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateDataError("cosine_matrix: zero-norm row")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for i, row in enumerate(a):
        for j, col in enumerate(b):
            out[i, j] = np.dot(row, col) / (na[i] * nb[j])
    return out


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"pearson inputs must be equal-length 1-D, got {x.shape}, {y.shape}")
    if x.size < 2:
        raise ContractError("pearson needs n >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.dot(xc, xc))
    sy = np.sqrt(np.dot(yc, yc))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateDataError("pearson: zero-variance input")
    return float(np.dot(xc, yc) / (sx * sy))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of fractional ranks (average-rank ties)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"spearman inputs must be equal-length 1-D, got {x.shape}, {y.shape}")
    if x.size < 2:
        raise ContractError("spearman needs n >= 2")
    return pearson(_average_ranks(x), _average_ranks(y))


# ---------------- bidirectional accuracy ----------------


def tatoeba_accuracy(src, tgt) -> tuple[float, float, float]:
    """Fraction of rows whose argmax-cosine neighbor is the same-index row,
    computed in both directions; ties break to the lowest index."""
    src, tgt = _as2d(src), _as2d(tgt)
    if src.shape[0] != tgt.shape[0]:
        raise AlignmentError(
            f"tatoeba_accuracy: {src.shape[0]} source vs {tgt.shape[0]} target rows"
        )
    cos = cosine_matrix(src, tgt)
    fwd = float(np.mean(np.argmax(cos, axis=1) == np.arange(src.shape[0])))
    bwd = float(np.mean(np.argmax(cos, axis=0) == np.arange(tgt.shape[0])))
    return fwd, bwd, 0.5 * (fwd + bwd)


# ---------------- margin scoring and mining ----------------


def _topk_sum(values: np.ndarray, k: int) -> float:
    """Sum of the k largest values, accumulated in ascending order."""
    k = min(k, values.size)
    top = np.sort(values)[values.size - k :]
    return float(np.sum(top))


def margin_score(i: int, j: int, src, tgt, k_nn: int = 4,
                 averaged: bool = False) -> float:
    """cos(s_i, t_j) over the summed cosines of each side's k_nn nearest
    neighbors in the full opposite matrix (the pair itself included).

    averaged=True divides each neighbor sum by 2k (the common variant); the
    default keeps the plain sums.
    """
    src, tgt = _as2d(src), _as2d(tgt)
    cos = cosine_matrix(src, tgt)
    return _margin_from_cos(cos, i, j, k_nn, averaged)


def _margin_from_cos(cos: np.ndarray, i: int, j: int, k_nn: int,
                     averaged: bool) -> float:
    ks = min(k_nn, cos.shape[1])
    kt = min(k_nn, cos.shape[0])
    src_sum = _topk_sum(cos[i, :], ks)
    tgt_sum = _topk_sum(cos[:, j], kt)
    if averaged:
        denom = src_sum / (2.0 * ks) + tgt_sum / (2.0 * kt)
    else:
        denom = src_sum + tgt_sum
    if denom <= 0.0:
        raise DegenerateDataError(
            f"margin_score: non-positive neighbor denominator {denom!r} at ({i}, {j})"
        )
    return float(cos[i, j] / denom)


def margin_matrix(src, tgt, k_nn: int = 4, averaged: bool = False) -> np.ndarray:
    src, tgt = _as2d(src), _as2d(tgt)
    cos = cosine_matrix(src, tgt)
    out = np.empty_like(cos)
    for i in range(cos.shape[0]):
        for j in range(cos.shape[1]):
            out[i, j] = _margin_from_cos(cos, i, j, k_nn, averaged)
    return out


def optimal_f1_threshold(scores: Sequence[float], is_gold: Sequence[bool],
                         n_gold: Optional[int] = None
                         ) -> tuple[float, float, float, float]:
    """Best accept-if-score>=threshold F1 over all candidate thresholds:
    midpoints between consecutive distinct scores plus +-inf sentinels.
    Ties in F1 resolve to the higher threshold. Recall's denominator is
    n_gold (defaults to the number of gold-labeled candidates)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(is_gold, dtype=bool)
    if scores.size < 1:
        raise ContractError("optimal_f1_threshold needs at least one candidate")
    if scores.shape != labels.shape:
        raise ContractError("scores and labels must align")
    total_gold = int(labels.sum()) if n_gold is None else int(n_gold)
    if total_gold < 1:
        raise ContractError("optimal_f1_threshold: no gold items")
    distinct = np.unique(scores)
    thresholds = [-np.inf]
    thresholds += [0.5 * (a + b) for a, b in zip(distinct[:-1], distinct[1:])]
    thresholds += [np.inf]
    best = (-1.0, -np.inf, 0.0, 0.0)  # f1, threshold, precision, recall
    for th in thresholds:
        sel = scores >= th
        n_sel = int(sel.sum())
        tp = int((sel & labels).sum())
        p = tp / n_sel if n_sel else 0.0
        r = tp / total_gold
        f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        if f1 > best[0] or (f1 == best[0] and th > best[1]):
            best = (f1, th, p, r)
    f1, th, p, r = best
    return float(th), float(p), float(r), float(f1)


def mine_pairs(src, tgt, method: str, gold: Sequence[tuple[int, int]],
               k_nn: int = 4) -> MiningResult:
    """One candidate per source row (argmax by the method's score), then an
    optimal-F1 threshold over candidate scores against the gold alignment."""
    gold_set = {(int(i), int(j)) for i, j in gold}
    if not gold_set:
        raise ContractError("mine_pairs: empty gold alignment")
    if method == "cosine":
        score = cosine_matrix(src, tgt)
    elif method == "margin":
        score = margin_matrix(src, tgt, k_nn=k_nn)
    else:
        raise ContractError(f"mine_pairs: unknown method {method!r}")
    cands = []
    for i in range(score.shape[0]):
        j = int(np.argmax(score[i]))
        cands.append((i, j, float(score[i, j])))
    labels = [(i, j) in gold_set for i, j, _ in cands]
    threshold, precision, recall, f1 = optimal_f1_threshold(
        [s for _, _, s in cands], labels, n_gold=len(gold_set)
    )
    pairs = sorted(cands, key=lambda c: (-c[2], c[0], c[1]))
    return MiningResult(pairs=pairs, threshold=threshold,
                        precision=precision, recall=recall, f1=f1)


# ---------------- retrieval and hubness ----------------


def retrieval_r_at_1(queries, kb, gold: Sequence[int]) -> float:
    """Fraction of queries whose argmax-cosine kb row is the gold row."""
    queries, kb = _as2d(queries), _as2d(kb)
    gold = np.asarray(gold, dtype=np.int64)
    if kb.shape[0] < 1:
        raise ContractError("retrieval_r_at_1: empty knowledge base")
    if gold.shape != (queries.shape[0],):
        raise AlignmentError("retrieval_r_at_1: one gold kb row per query required")
    cos = cosine_matrix(queries, kb)
    return float(np.mean(np.argmax(cos, axis=1) == gold))


def hubness(emb, k_nn: int = 4) -> tuple[np.ndarray, float]:
    """k-occurrence counts N_k (self excluded) and their sample skewness."""
    e = _as2d(emb)
    n = e.shape[0]
    if n <= k_nn:
        raise ContractError(f"hubness needs n > k_nn, got n={n}, k_nn={k_nn}")
    cos = cosine_matrix(e, e)
    np.fill_diagonal(cos, -np.inf)
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        nbrs = np.argsort(-cos[i], kind="stable")[:k_nn]
        counts[nbrs] += 1
    c = counts.astype(np.float64)
    m = c.mean()
    m2 = np.mean((c - m) ** 2)
    if m2 == 0.0:
        return counts, 0.0
    m3 = np.mean((c - m) ** 3)
    return counts, float(m3 / m2**1.5)


# ---------------- report assembly ----------------


def overall_score(report: EvalReport) -> float:
    """Mean of six subtasks, the two mining F1 variants averaged first."""
    fields = (
        report.sts_english, report.sts_crosslingual, report.tatoeba_acc,
        report.bucc_cosine_f1, report.bucc_margin_f1,
        report.retrieval_r1_primary, report.retrieval_r1_multilingual,
    )
    if any(v is None for v in fields):
        raise ContractError("overall_score: report has missing fields")
    bucc = 0.5 * (report.bucc_cosine_f1 + report.bucc_margin_f1)
    six = (report.sts_english, report.sts_crosslingual, report.tatoeba_acc,
           bucc, report.retrieval_r1_primary, report.retrieval_r1_multilingual)
    return float(np.mean(six))


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "sts_english", "sts_crosslingual", "tatoeba_acc", "bucc_cosine_f1",
        "bucc_margin_f1", "retrieval_r1_primary", "retrieval_r1_multilingual",
        "overall_score", "seed", "config_hash",
    ],
    "properties": {
        "sts_english": {"type": "number"},
        "sts_crosslingual": {"type": "number"},
        "tatoeba_acc": {"type": "number"},
        "bucc_cosine_f1": {"type": "number"},
        "bucc_margin_f1": {"type": "number"},
        "retrieval_r1_primary": {"type": "number"},
        "retrieval_r1_multilingual": {"type": "number"},
        "overall_score": {"type": "number"},
        "seed": {"type": "integer"},
        "config_hash": {"type": "string"},
        "tatoeba_by_language": {"type": "object"},
        "mining": {"type": "object"},
        "hubness": {"type": "object"},
        "step": {"type": "integer"},
    },
}


# ---------------- embedding file format ----------------


def write_embeddings(path, vectors: np.ndarray, ids: Optional[Sequence[str]] = None,
                     ids_path=None) -> None:
    arr = np.ascontiguousarray(np.asarray(vectors), dtype="<f4")
    if arr.ndim != 2:
        raise ContractError(f"write_embeddings expects [n, k], got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(VMSB_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())
    if ids is not None and ids_path is not None:
        Path(ids_path).write_text("\n".join(ids) + "\n", encoding="utf-8")


def read_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != VMSB_MAGIC:
        raise FormatError(f"{path}: missing VMSB magic")
    n, k = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * n * k
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", count=n * k, offset=12).copy().reshape(n, k)


def write_report(path, report: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: bad report JSON: {e}") from None
