"""Synthetic multilingual parallel corpus.

Each language renders a hidden concept sequence through its own bijective
surface-token block (blocks are disjoint across languages, so cross-lingual
alignment is learnable only through the training objective), a deterministic
per-language word-order permutation, and random language-specific filler
insertions. Pivot-language pairing, graded-similarity pairs, held-out mining
and retrieval sets, and unseen-language holdouts are all generated from one
seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, VocabularyError
from .model import PairBatch

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
FILLERS_PER_LANGUAGE = 8


@dataclass
class CorpusSpec:
    n_languages: int = 4
    n_concepts: int = 64
    sentence_len: tuple[int, int] = (4, 10)
    n_train_pairs: int = 20000
    pivot_languages: tuple[int, ...] = (0, 1)
    noise_rate: float = 0.1
    permutation_strength: float = 0.5
    holdout_languages: tuple[int, ...] = ()
    seed: int = 7
    n_eval_pairs: int = 200

    def __post_init__(self):
        self.sentence_len = tuple(self.sentence_len)  # type: ignore[assignment]
        self.pivot_languages = tuple(self.pivot_languages)  # type: ignore[assignment]
        self.holdout_languages = tuple(self.holdout_languages)  # type: ignore[assignment]
        n = self.n_languages
        if n < 2:
            raise ConfigError("corpus.n_languages must be >= 2")
        if not self.pivot_languages:
            raise ConfigError("corpus.pivot_languages must be non-empty")
        if any(not 0 <= p < n for p in self.pivot_languages):
            raise ConfigError(
                f"corpus.pivot_languages {self.pivot_languages} not within 0..{n - 1}"
            )
        if any(not 0 <= h < n for h in self.holdout_languages):
            raise ConfigError(
                f"corpus.holdout_languages {self.holdout_languages} not within 0..{n - 1}"
            )
        if set(self.pivot_languages) & set(self.holdout_languages):
            raise ConfigError("corpus.holdout_languages overlaps pivot_languages")
        if len(set(range(n)) - set(self.holdout_languages)) < 2:
            raise ConfigError("corpus.holdout_languages leaves fewer than 2 languages")
        lo, hi = self.sentence_len
        if not 1 <= lo <= hi:
            raise ConfigError(f"corpus.sentence_len range {self.sentence_len} invalid")
        if hi > self.n_concepts:
            raise ConfigError(
                f"corpus.sentence_len max {hi} exceeds n_concepts {self.n_concepts} "
                "(concepts are drawn without replacement)"
            )
        if 2 * hi > self.n_concepts:
            raise ConfigError(
                f"corpus.n_concepts {self.n_concepts} must be >= 2x max sentence_len "
                f"{hi} so graded pairs can use disjoint replacements"
            )
        if self.n_train_pairs < 1:
            raise ConfigError("corpus.n_train_pairs must be >= 1")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError("corpus.noise_rate must be in [0, 1)")
        if not 0.0 <= self.permutation_strength <= 1.0:
            raise ConfigError("corpus.permutation_strength must be in [0, 1]")
        if self.n_eval_pairs < 2:
            raise ConfigError("corpus.n_eval_pairs must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sentence_len"] = list(self.sentence_len)
        d["pivot_languages"] = list(self.pivot_languages)
        d["holdout_languages"] = list(self.holdout_languages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        names = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"corpus config has unknown fields: {sorted(unknown)}")
        return cls(**d)


def vocab_size_for(spec: CorpusSpec) -> int:
    return len(RESERVED_TOKENS) + spec.n_languages * (
        spec.n_concepts + FILLERS_PER_LANGUAGE
    )


@dataclass
class SyntheticLanguage:
    """One language: its surface-token block and seeded permutation rule."""

    lang_id: int
    n_concepts: int
    permutation_strength: float
    perm_seed: tuple[int, ...]

    def concept_token(self, concept: int) -> str:
        return f"L{self.lang_id}_C{concept:03d}"

    def filler_token(self, f: int) -> str:
        return f"L{self.lang_id}_F{f}"

    def permute(self, seq: list[str]) -> list[str]:
        """Deterministic per-(language, length) bounded adjacent-swap shuffle."""
        n = len(seq)
        n_swaps = int(round(self.permutation_strength * n))
        if n < 2 or n_swaps == 0:
            return list(seq)
        rng = np.random.default_rng(self.perm_seed + (n,))
        out = list(seq)
        for pos in rng.integers(0, n - 1, size=n_swaps):
            out[pos], out[pos + 1] = out[pos + 1], out[pos]
        return out

    def render(self, concepts: Sequence[int], rng: np.random.Generator,
               noise_rate: float) -> list[str]:
        """Surface form: map concepts, permute word order, insert fillers."""
        surface = self.permute([self.concept_token(c) for c in concepts])
        if noise_rate <= 0.0:
            return surface
        out: list[str] = []
        for tok in surface:
            if rng.random() < noise_rate:
                out.append(self.filler_token(int(rng.integers(FILLERS_PER_LANGUAGE))))
            out.append(tok)
        return out


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabularyError(f"token {token!r} not in vocabulary") from None

    def token_of(self, tid: int) -> str:
        if not 0 <= tid < len(self.tokens):
            raise VocabularyError(f"token id {tid} outside vocabulary of {len(self.tokens)}")
        return self.tokens[tid]

    @classmethod
    def build(cls, spec: CorpusSpec) -> "Vocabulary":
        tokens = list(RESERVED_TOKENS)
        for lang in range(spec.n_languages):
            tokens.extend(f"L{lang}_C{c:03d}" for c in range(spec.n_concepts))
            tokens.extend(f"L{lang}_F{f}" for f in range(FILLERS_PER_LANGUAGE))
        return cls(tokens)

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


@dataclass
class ParallelPair:
    lang_a: int
    tokens_a: list[str]
    lang_b: int
    tokens_b: list[str]
    gold_similarity: Optional[float] = None
    concepts_a: Optional[tuple[int, ...]] = None
    concepts_b: Optional[tuple[int, ...]] = None


@dataclass
class Corpus:
    spec: CorpusSpec
    languages: list[SyntheticLanguage]
    vocab: Vocabulary
    train: list[ParallelPair]
    sts: list[ParallelPair]
    mining: list[ParallelPair]
    retrieval_primary: list[ParallelPair]
    retrieval_multilingual: list[ParallelPair]


def _sample_concepts(rng: np.random.Generator, spec: CorpusSpec,
                     taken: Optional[set] = None) -> tuple[int, ...]:
    lo, hi = spec.sentence_len
    while True:
        length = int(rng.integers(lo, hi + 1))
        concepts = tuple(int(c) for c in rng.choice(spec.n_concepts, length, replace=False))
        if taken is None or concepts not in taken:
            return concepts


def generate_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    languages = [
        SyntheticLanguage(
            lang_id=lang,
            n_concepts=spec.n_concepts,
            permutation_strength=spec.permutation_strength,
            perm_seed=(spec.seed, 104729, lang),
        )
        for lang in range(spec.n_languages)
    ]
    vocab = Vocabulary.build(spec)
    non_holdout = [l for l in range(spec.n_languages) if l not in spec.holdout_languages]
    all_langs = list(range(spec.n_languages))

    def render_pair(concepts_a, concepts_b, lang_a, lang_b, gold=None) -> ParallelPair:
        return ParallelPair(
            lang_a=lang_a,
            tokens_a=languages[lang_a].render(concepts_a, rng, spec.noise_rate),
            lang_b=lang_b,
            tokens_b=languages[lang_b].render(concepts_b, rng, spec.noise_rate),
            gold_similarity=gold,
            concepts_a=tuple(concepts_a),
            concepts_b=tuple(concepts_b),
        )

    train: list[ParallelPair] = []
    train_concepts: set[tuple[int, ...]] = set()
    for _ in range(spec.n_train_pairs):
        lang_a = int(rng.choice(spec.pivot_languages))
        partners = [l for l in non_holdout if l != lang_a]
        lang_b = int(rng.choice(partners))
        concepts = _sample_concepts(rng, spec)
        train_concepts.add(concepts)
        train.append(render_pair(concepts, concepts, lang_a, lang_b))

    pivot0 = spec.pivot_languages[0]

    sts: list[ParallelPair] = []
    for idx in range(spec.n_eval_pairs):
        if idx % 2 == 0:
            lang_a = lang_b = pivot0
        else:
            lang_a = pivot0
            lang_b = int(rng.choice([l for l in all_langs if l != pivot0]))
        concepts_a = _sample_concepts(rng, spec, taken=train_concepts)
        length = len(concepts_a)
        overlap = int(rng.integers(0, length + 1))
        if overlap == length:
            concepts_b = concepts_a
        else:
            kept_idx = rng.choice(length, overlap, replace=False)
            kept = [concepts_a[i] for i in sorted(int(i) for i in kept_idx)]
            pool = [c for c in range(spec.n_concepts) if c not in concepts_a]
            fresh = [int(c) for c in rng.choice(len(pool), length - overlap, replace=False)]
            merged = kept + [pool[c] for c in fresh]
            concepts_b = tuple(merged[i] for i in rng.permutation(length))
        union = 2 * length - overlap
        gold = 5.0 * overlap / union
        sts.append(render_pair(concepts_a, concepts_b, lang_a, lang_b, gold=gold))

    mining: list[ParallelPair] = []
    for _ in range(spec.n_eval_pairs):
        lang_b = int(rng.choice([l for l in all_langs if l != pivot0]))
        concepts = _sample_concepts(rng, spec, taken=train_concepts)
        mining.append(render_pair(concepts, concepts, pivot0, lang_b))

    def retrieval_set(query_lang_of) -> list[ParallelPair]:
        out = []
        for _ in range(spec.n_eval_pairs):
            kb_lang = int(rng.choice([l for l in all_langs if l != pivot0]))
            q_lang = query_lang_of(kb_lang)
            concepts = _sample_concepts(rng, spec, taken=train_concepts)
            out.append(render_pair(concepts, concepts, q_lang, kb_lang))
        return out

    retrieval_primary = retrieval_set(lambda kb_lang: pivot0)
    retrieval_multilingual = retrieval_set(
        lambda kb_lang: int(rng.choice([l for l in all_langs if l != kb_lang]))
    )

    return Corpus(
        spec=spec,
        languages=languages,
        vocab=vocab,
        train=train,
        sts=sts,
        mining=mining,
        retrieval_primary=retrieval_primary,
        retrieval_multilingual=retrieval_multilingual,
    )


# ---------------- tokenization and batching ----------------


def tokenize(tokens: Iterable[str], vocab: Vocabulary, max_len: int) -> np.ndarray:
    """[BOS, ids..., EOS], truncated to max_len with EOS kept last."""
    ids = [BOS_ID] + [vocab.id_of(t) for t in tokens] + [EOS_ID]
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS_ID]
    return np.asarray(ids, dtype=np.int64)


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    specials = {PAD_ID, BOS_ID, EOS_ID}
    return [vocab.token_of(int(i)) for i in ids if int(i) not in specials]


def build_pair_batch(pairs: Sequence[ParallelPair], vocab: Vocabulary,
                     max_len: int) -> PairBatch:
    rows_a = [tokenize(p.tokens_a, vocab, max_len) for p in pairs]
    rows_b = [tokenize(p.tokens_b, vocab, max_len) for p in pairs]
    t = max(max(len(r) for r in rows_a), max(len(r) for r in rows_b))
    b = len(pairs)
    tokens_a = np.full((b, t), PAD_ID, dtype=np.int64)
    tokens_b = np.full((b, t), PAD_ID, dtype=np.int64)
    mask_a = np.zeros((b, t), dtype=np.float32)
    mask_b = np.zeros((b, t), dtype=np.float32)
    for i, (ra, rb) in enumerate(zip(rows_a, rows_b)):
        tokens_a[i, : len(ra)] = ra
        mask_a[i, : len(ra)] = 1.0
        tokens_b[i, : len(rb)] = rb
        mask_b[i, : len(rb)] = 1.0
    return PairBatch(
        tokens_a=tokens_a,
        tokens_b=tokens_b,
        mask_a=mask_a,
        mask_b=mask_b,
        lang_a=np.asarray([p.lang_a for p in pairs], dtype=np.int64),
        lang_b=np.asarray([p.lang_b for p in pairs], dtype=np.int64),
        sem_side=np.arange(b, dtype=np.int64) % 2,
    )


def epoch_batches(pairs: Sequence[ParallelPair], batch_size: int, seed: int,
                  epoch: int, vocab: Vocabulary, max_len: int) -> list[PairBatch]:
    """Deterministic seeded shuffle of one epoch, split into batches."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    batches = []
    for start in range(0, len(pairs), batch_size):
        subset = [pairs[int(i)] for i in order[start : start + batch_size]]
        batches.append(build_pair_batch(subset, vocab, max_len))
    return batches


# ---------------- TSV on-disk format ----------------


def write_pairs(path, pairs: Sequence[ParallelPair]) -> None:
    lines = []
    for p in pairs:
        fields = [str(p.lang_a), " ".join(p.tokens_a), str(p.lang_b), " ".join(p.tokens_b)]
        if p.gold_similarity is not None:
            fields.append(repr(float(p.gold_similarity)))
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pairs(path) -> list[ParallelPair]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) not in (4, 5):
            raise ConfigError(f"pair file {path}: expected 4 or 5 columns, got {len(fields)}")
        gold = float(fields[4]) if len(fields) == 5 else None
        out.append(
            ParallelPair(
                lang_a=int(fields[0]),
                tokens_a=fields[1].split() if fields[1] else [],
                lang_b=int(fields[2]),
                tokens_b=fields[3].split() if fields[3] else [],
                gold_similarity=gold,
            )
        )
    return out


CORPUS_FILES = {
    "train": "train.tsv",
    "sts": "sts.tsv",
    "mining": "mining.tsv",
    "retrieval_primary": "retrieval_primary.tsv",
    "retrieval_multilingual": "retrieval_multilingual.tsv",
}


def write_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for attr, fname in CORPUS_FILES.items():
        write_pairs(out / fname, getattr(corpus, attr))
    corpus.vocab.write(out / "vocab.txt")
    manifest = {
        "seed": corpus.spec.seed,
        "spec": corpus.spec.to_dict(),
        "vocab_size": len(corpus.vocab),
        "counts": {attr: len(getattr(corpus, attr)) for attr in CORPUS_FILES},
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_corpus_dir(corpus_dir) -> dict:
    """Read back the generated sets; returns dict with pair lists and vocab."""
    base = Path(corpus_dir)
    if not base.is_dir():
        raise ConfigError(f"corpus directory {base} does not exist; run `gen` first")
    data = {}
    for attr, fname in CORPUS_FILES.items():
        fpath = base / fname
        if not fpath.exists():
            raise ConfigError(f"corpus set {fname} missing from {base}")
        data[attr] = read_pairs(fpath)
    data["vocab"] = Vocabulary.read(base / "vocab.txt")
    return data
