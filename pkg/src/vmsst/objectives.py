"""Training losses over parallel pair batches.

Four objectives share the same encoders/decoder:
  - vmsst: two translation NLL terms (decoding each side from the *mean* of
    the other side's semantic posterior) plus a weighted negative ELBO with
    three sampled latents (z_sem from the alternating side, z_l per side).
  - bitranslation: the translation terms alone.
  - contrastive: in-batch-negative softmax over raw dot products of the
    semantic posterior means.
  - vmsst_contrastive: contrastive plus lambda times the full vmsst term
    (the vmsst term's own elbo weight fixed to 1).

Losses are reported per row, then averaged over the batch; reconstruction
NLLs are normalized per unmasked target token, KL terms summed over latent
dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EmptySequenceError
from .model import GaussianPosterior, Model, PairBatch, reparameterize
from .numcore import (
    Tensor,
    cross_entropy_rows,
    exp,
    matmul,
    reduce_mean,
    reshape,
    transpose,
)

OBJECTIVES = ("contrastive", "bitranslation", "vmsst", "vmsst_contrastive")


@dataclass
class LossBreakdown:
    """Scalar summary of one loss evaluation (batch means per component)."""

    objective: str
    total: float
    recon_a: float = 0.0
    recon_b: float = 0.0
    kl_sem: float = 0.0
    kl_lang_a: float = 0.0
    kl_lang_b: float = 0.0
    translation_ab: float = 0.0
    translation_ba: float = 0.0
    contrastive: float = 0.0
    kl_weight: float = 0.0
    lam: float = 0.0

    def expected_total(self) -> float:
        """The documented combination of the parts for this objective."""
        kl = self.kl_sem + self.kl_lang_a + self.kl_lang_b
        neg_elbo = self.recon_a + self.recon_b + self.kl_weight * kl
        trans = self.translation_ab + self.translation_ba
        if self.objective == "contrastive":
            return self.contrastive
        if self.objective == "bitranslation":
            return trans
        if self.objective == "vmsst":
            return trans + self.lam * neg_elbo
        if self.objective == "vmsst_contrastive":
            return self.contrastive + self.lam * (trans + neg_elbo)
        raise ContractError(f"unknown objective {self.objective!r}")


def kl_diag_gaussian(post: GaussianPosterior) -> Tensor:
    """Per-row KL(q || N(0, I)) = 0.5 * sum(mu^2 + var - 1 - log var)."""
    mu, lv = post.mu, post.log_var
    terms = mu * mu + exp(lv) - 1.0 - lv
    return terms.sum(axis=-1) * 0.5


def reconstruction_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-row token-mean NLL. logits [B,T,V], targets/mask [B,T]."""
    b, t, v = logits.shape
    targets = np.asarray(targets)
    mask_arr = np.asarray(mask, dtype=logits.dtype)
    counts = mask_arr.sum(axis=1)
    if np.any(counts <= 0):
        raise EmptySequenceError("reconstruction_nll: a row masks out every target")
    # targets at masked positions are multiplied out; clip them into range
    safe_targets = np.where(mask_arr > 0, targets, 0).astype(np.int64)
    nll = cross_entropy_rows(reshape(logits, (b * t, v)), safe_targets.reshape(-1))
    per_tok = reshape(nll, (b, t)) * Tensor(mask_arr)
    return per_tok.sum(axis=1) * Tensor((1.0 / counts).astype(logits.dtype))


def encode_pair_posteriors(model: Model, batch: PairBatch,
                           dropout_rate: float = 0.0, rng=None):
    """All four posteriors of a batch: (sem_a, sem_b, lang_a, lang_b).

    Callers evaluating several objectives on one batch can compute these once
    and pass them through each loss's `posts` argument."""
    drop = dropout_rate
    sem_a = model.encode_semantic(batch.tokens_a, batch.mask_a, drop, rng)
    sem_b = model.encode_semantic(batch.tokens_b, batch.mask_b, drop, rng)
    lang_a = model.encode_language(batch.tokens_a, batch.mask_a, batch.lang_a, drop, rng)
    lang_b = model.encode_language(batch.tokens_b, batch.mask_b, batch.lang_b, drop, rng)
    return sem_a, sem_b, lang_a, lang_b


def _select_semantic(batch: PairBatch, sem_a: GaussianPosterior,
                     sem_b: GaussianPosterior, dtype) -> GaussianPosterior:
    side = np.asarray(batch.sem_side, dtype=dtype)[:, None]
    mu = sem_a.mu * Tensor(1.0 - side) + sem_b.mu * Tensor(side)
    lv = sem_a.log_var * Tensor(1.0 - side) + sem_b.log_var * Tensor(side)
    return GaussianPosterior(mu, lv)


def _translation_rows(model: Model, batch: PairBatch, posts, drop: float, rng):
    sem_a, sem_b, lang_a, lang_b = posts
    # a -> b: decode b conditioned on mu_sem(a) and mu_lang(b); no sampling
    logits_b = model.decode_logits(sem_a.mu, lang_b.mu, batch.tokens_b,
                                   batch.lang_b, batch.mask_b, drop, rng)
    t_ab = reconstruction_nll(logits_b, batch.tokens_b[:, 1:], batch.mask_b[:, 1:])
    logits_a = model.decode_logits(sem_b.mu, lang_a.mu, batch.tokens_a,
                                   batch.lang_a, batch.mask_a, drop, rng)
    t_ba = reconstruction_nll(logits_a, batch.tokens_a[:, 1:], batch.mask_a[:, 1:])
    return t_ab, t_ba


def _elbo_rows(model: Model, batch: PairBatch, posts, rng: np.random.Generator,
               kl_weight: float, drop: float):
    if rng is None:
        raise ContractError("elbo requires a random generator for latent sampling")
    sem_a, sem_b, lang_a, lang_b = posts
    k = model.config.latent_dim
    b = batch.size
    sem = _select_semantic(batch, sem_a, sem_b, model.dtype)
    z_sem = reparameterize(sem, rng.standard_normal((b, k)))
    z_la = reparameterize(lang_a, rng.standard_normal((b, k)))
    z_lb = reparameterize(lang_b, rng.standard_normal((b, k)))
    logits_a = model.decode_logits(z_sem, z_la, batch.tokens_a, batch.lang_a,
                                   batch.mask_a, drop, rng)
    recon_a = reconstruction_nll(logits_a, batch.tokens_a[:, 1:], batch.mask_a[:, 1:])
    logits_b = model.decode_logits(z_sem, z_lb, batch.tokens_b, batch.lang_b,
                                   batch.mask_b, drop, rng)
    recon_b = reconstruction_nll(logits_b, batch.tokens_b[:, 1:], batch.mask_b[:, 1:])
    kl_sem = kl_diag_gaussian(sem)
    kl_la = kl_diag_gaussian(lang_a)
    kl_lb = kl_diag_gaussian(lang_b)
    neg_elbo = recon_a + recon_b + (kl_sem + kl_la + kl_lb) * kl_weight
    parts = {
        "recon_a": recon_a, "recon_b": recon_b,
        "kl_sem": kl_sem, "kl_lang_a": kl_la, "kl_lang_b": kl_lb,
    }
    return neg_elbo, parts


def elbo_pair(model: Model, batch: PairBatch, rng: np.random.Generator,
              kl_weight: float, dropout_rate: float = 0.0, posts=None):
    """Per-row negative ELBO and its named parts (all [B] tensors)."""
    if posts is None:
        posts = encode_pair_posteriors(model, batch, dropout_rate, rng)
    return _elbo_rows(model, batch, posts, rng, kl_weight, dropout_rate)


def translation_terms(model: Model, batch: PairBatch, dropout_rate: float = 0.0,
                      rng=None, posts=None):
    """Per-row translation NLLs (a->b, b->a); deterministic, means only."""
    if posts is None:
        posts = encode_pair_posteriors(model, batch, dropout_rate, rng)
    return _translation_rows(model, batch, posts, dropout_rate, rng)


def contrastive_loss(s: Tensor, t: Tensor) -> Tensor:
    """In-batch-negative loss over raw dot products of paired embeddings."""
    if s.shape[0] == 0:
        raise ContractError("contrastive_loss: empty batch")
    if s.shape != t.shape:
        raise ContractError(f"contrastive_loss shapes differ: {s.shape} vs {t.shape}")
    b = s.shape[0]
    scores = matmul(s, transpose(t, (1, 0)))
    diag = np.arange(b)
    nll_st = cross_entropy_rows(scores, diag)
    nll_ts = cross_entropy_rows(transpose(scores, (1, 0)), diag)
    return reduce_mean(nll_st + nll_ts) * 0.5


def _mean(t: Tensor) -> float:
    return float(t.data.mean())


def vmsst_loss(model: Model, batch: PairBatch, rng: np.random.Generator,
               lam: float, kl_weight: float, dropout_rate: float = 0.0,
               posts=None):
    """Translation terms plus lam * negative ELBO, averaged over the batch."""
    if lam < 0:
        raise ContractError("vmsst_loss: lambda must be >= 0")
    if posts is None:
        posts = encode_pair_posteriors(model, batch, dropout_rate, rng)
    neg_elbo, parts = _elbo_rows(model, batch, posts, rng, kl_weight, dropout_rate)
    t_ab, t_ba = _translation_rows(model, batch, posts, dropout_rate, rng)
    total = reduce_mean(t_ab + t_ba + neg_elbo * lam)
    breakdown = LossBreakdown(
        objective="vmsst", total=float(total.data),
        recon_a=_mean(parts["recon_a"]), recon_b=_mean(parts["recon_b"]),
        kl_sem=_mean(parts["kl_sem"]), kl_lang_a=_mean(parts["kl_lang_a"]),
        kl_lang_b=_mean(parts["kl_lang_b"]),
        translation_ab=_mean(t_ab), translation_ba=_mean(t_ba),
        kl_weight=kl_weight, lam=lam,
    )
    return total, breakdown


def bitranslation_loss(model: Model, batch: PairBatch, dropout_rate: float = 0.0,
                       rng=None, posts=None):
    """Mean of the two translation NLLs; no latent sampling, no KL."""
    t_ab, t_ba = translation_terms(model, batch, dropout_rate, rng, posts=posts)
    total = reduce_mean(t_ab + t_ba)
    breakdown = LossBreakdown(
        objective="bitranslation", total=float(total.data),
        translation_ab=_mean(t_ab), translation_ba=_mean(t_ba),
    )
    return total, breakdown


def contrastive_pair_loss(model: Model, batch: PairBatch,
                          dropout_rate: float = 0.0, rng=None, posts=None):
    """Contrastive objective over a batch: embeds both sides, then the loss."""
    if posts is None:
        sem_a = model.encode_semantic(batch.tokens_a, batch.mask_a, dropout_rate, rng)
        sem_b = model.encode_semantic(batch.tokens_b, batch.mask_b, dropout_rate, rng)
    else:
        sem_a, sem_b = posts[0], posts[1]
    total = contrastive_loss(sem_a.mu, sem_b.mu)
    breakdown = LossBreakdown(
        objective="contrastive", total=float(total.data),
        contrastive=float(total.data),
    )
    return total, breakdown


def vmsst_contrastive_loss(model: Model, batch: PairBatch,
                           rng: np.random.Generator, lam: float,
                           kl_weight: float, dropout_rate: float = 0.0,
                           posts=None):
    """Contrastive loss plus lam times the whole vmsst term (internal weight 1)."""
    if lam < 0:
        raise ContractError("vmsst_contrastive_loss: lambda must be >= 0")
    if posts is None:
        posts = encode_pair_posteriors(model, batch, dropout_rate, rng)
    sem_a, sem_b = posts[0], posts[1]
    contr = contrastive_loss(sem_a.mu, sem_b.mu)
    neg_elbo, parts = _elbo_rows(model, batch, posts, rng, kl_weight, dropout_rate)
    t_ab, t_ba = _translation_rows(model, batch, posts, dropout_rate, rng)
    vmsst_term = reduce_mean(t_ab + t_ba + neg_elbo)
    total = contr + vmsst_term * lam
    breakdown = LossBreakdown(
        objective="vmsst_contrastive", total=float(total.data),
        recon_a=_mean(parts["recon_a"]), recon_b=_mean(parts["recon_b"]),
        kl_sem=_mean(parts["kl_sem"]), kl_lang_a=_mean(parts["kl_lang_a"]),
        kl_lang_b=_mean(parts["kl_lang_b"]),
        translation_ab=_mean(t_ab), translation_ba=_mean(t_ba),
        contrastive=float(contr.data), kl_weight=kl_weight, lam=lam,
    )
    return total, breakdown


def compute_loss(objective: str, model: Model, batch: PairBatch,
                 rng: np.random.Generator, lam: float, kl_weight: float,
                 dropout_rate: float = 0.0):
    if objective == "contrastive":
        return contrastive_pair_loss(model, batch, dropout_rate, rng)
    if objective == "bitranslation":
        return bitranslation_loss(model, batch, dropout_rate, rng)
    if objective == "vmsst":
        return vmsst_loss(model, batch, rng, lam, kl_weight, dropout_rate)
    if objective == "vmsst_contrastive":
        return vmsst_contrastive_loss(model, batch, rng, lam, kl_weight, dropout_rate)
    raise ContractError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
