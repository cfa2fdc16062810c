"""Shared-embedding twin-encoder / latent-conditioned decoder architecture.

Two transformer encoder stacks (semantic and language) share one token
embedding table and produce diagonal-Gaussian posteriors by masked mean
pooling plus linear heads. A single causal decoder has no cross-attention:
per layer it adds linear maps of the two latents where cross-attention would
sit, and the output logits project the concatenation
[hidden; mapped z_sem; mapped z_lang].
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .numcore import (
    Tensor,
    broadcast_to,
    clamp,
    concat,
    dropout,
    embedding,
    exp,
    gelu,
    layer_norm,
    masked_mean_pool,
    matmul,
    parameter,
    put_rows,
    reshape,
    softmax,
    transpose,
)

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
ATTN_NEG = -1e9
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int
    model_dim: int
    latent_dim: int
    n_enc_layers: int
    n_dec_layers: int
    n_heads: int
    ff_dim: int
    n_languages: int
    max_len: int = 32
    factored_projection: bool = False
    single_encoder: bool = False
    n_language_encoders: int = 1
    use_encoder_lang_emb: bool = True
    use_decoder_lang_emb: bool = True

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ConfigError(
                f"model.model_dim={self.model_dim} not divisible by n_heads={self.n_heads}"
            )
        if self.latent_dim < 1:
            raise ConfigError("model.latent_dim must be >= 1")
        if self.max_len < 2:
            raise ConfigError("model.max_len must be >= 2")
        if self.n_languages < 2:
            raise ConfigError("model.n_languages must be >= 2")
        if not 1 <= self.n_language_encoders <= self.n_languages:
            raise ConfigError(
                f"model.n_language_encoders={self.n_language_encoders} "
                f"outside [1, {self.n_languages}]"
            )
        if self.single_encoder and self.n_language_encoders != 1:
            raise ConfigError(
                "model.single_encoder requires n_language_encoders == 1"
            )
        if min(self.vocab_size, self.n_enc_layers, self.n_dec_layers, self.ff_dim) < 1:
            raise ConfigError("model sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"model config has unknown fields: {sorted(unknown)}")
        return cls(**d)

    def language_encoder_index(self, lang_id: int) -> int:
        """Round-robin assignment of languages to language-encoder stacks."""
        return lang_id % self.n_language_encoders


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian q(z|x): mean and log variance, each [B, k]."""

    mu: Tensor
    log_var: Tensor


@dataclass
class PairBatch:
    """Tokenized parallel pairs. sem_side[i] is 0 when the semantic encoder
    reads side a of row i, 1 for side b (alternating by in-batch index)."""

    tokens_a: np.ndarray
    tokens_b: np.ndarray
    mask_a: np.ndarray
    mask_b: np.ndarray
    lang_a: np.ndarray
    lang_b: np.ndarray
    sem_side: np.ndarray

    @property
    def size(self) -> int:
        return self.tokens_a.shape[0]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)


def init_parameters(
    config: ModelConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, Tensor]:
    """Fresh parameter map; names are stable across save/load."""
    v, d, k = config.vocab_size, config.model_dim, config.latent_dim
    ff, n = config.ff_dim, config.n_languages
    emb_std = 1.0 / np.sqrt(d)
    p: dict[str, Tensor] = {}

    def emb(name, rows, cols):
        p[name] = parameter((rng.standard_normal((rows, cols)) * emb_std).astype(dtype))

    def linear(name, fan_in, fan_out, bias=True):
        p[f"{name}.w"] = parameter(_xavier(rng, fan_in, fan_out, dtype))
        if bias:
            p[f"{name}.b"] = parameter(np.zeros(fan_out, dtype=dtype))

    def ln(name):
        p[f"{name}.g"] = parameter(np.ones(d, dtype=dtype))
        p[f"{name}.b"] = parameter(np.zeros(d, dtype=dtype))

    def stack(prefix, n_layers, with_injection=False):
        for i in range(n_layers):
            base = f"{prefix}.l{i}"
            ln(f"{base}.ln1")
            for proj in ("wq", "wk", "wv", "wo"):
                p[f"{base}.attn.{proj}"] = parameter(_xavier(rng, d, d, dtype))
                p[f"{base}.attn.{proj[1]}b"] = parameter(np.zeros(d, dtype=dtype))
            ln(f"{base}.ln2")
            linear(f"{base}.ffn.fc1", d, ff)
            linear(f"{base}.ffn.fc2", ff, d)
            if with_injection:
                p[f"{base}.inj_sem.w"] = parameter(_xavier(rng, k, d, dtype))
                p[f"{base}.inj_lang.w"] = parameter(_xavier(rng, k, d, dtype))
        ln(f"{prefix}.ln_f")

    emb("token_emb", v, d)
    emb("pos_emb", config.max_len, d)
    emb("lang_emb", n, d)
    stack("enc_sem", config.n_enc_layers)
    if not config.single_encoder:
        for e in range(config.n_language_encoders):
            stack(f"enc_lang{e}", config.n_enc_layers)
    stack("dec", config.n_dec_layers, with_injection=True)
    for kind in ("sem", "lang"):
        linear(f"head.{kind}.mu", d, k)
        linear(f"head.{kind}.logvar", d, k)
    p["out.map_sem.w"] = parameter(_xavier(rng, k, d, dtype))
    p["out.map_lang.w"] = parameter(_xavier(rng, k, d, dtype))
    if config.factored_projection:
        p["out.proj1.w"] = parameter(_xavier(rng, 3 * d, d, dtype))
        p["out.proj2.w"] = parameter(_xavier(rng, d, v, dtype))
    else:
        p["out.proj.w"] = parameter(_xavier(rng, 3 * d, v, dtype))
    return p


def parameter_count(params: dict[str, Tensor], prefix: str = "") -> int:
    return sum(t.size for name, t in params.items() if name.startswith(prefix))


def reparameterize(post: GaussianPosterior, noise: np.ndarray) -> Tensor:
    """z = mu + exp(log_var / 2) * noise; gradients flow to mu and log_var."""
    std = exp(post.log_var * 0.5)
    return post.mu + std * Tensor(np.asarray(noise, dtype=post.mu.dtype))


class Model:
    """Parameters plus forward passes. Batched everywhere: tokens [B,T]."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        return cls(config, init_parameters(config, np.random.default_rng(seed), dtype))

    @property
    def dtype(self):
        return self.params["token_emb"].dtype

    # ---------------- internals ----------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        y = matmul(x, self.params[f"{name}.w"])
        b = self.params.get(f"{name}.b")
        return y + b if b is not None else y

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"], LN_EPS)

    def _attention(self, x: Tensor, base: str, bias: np.ndarray,
                   drop: float, rng) -> Tensor:
        b, t, d = x.shape
        h = self.config.n_heads
        hd = d // h
        p = self.params

        def heads(name):
            y = matmul(x, p[f"{base}.attn.{name}"]) + p[f"{base}.attn.{name[1]}b"]
            return transpose(reshape(y, (b, t, h, hd)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        scores = scores + Tensor(bias)
        attn = softmax(scores, axis=-1)
        if drop > 0.0:
            attn = dropout(attn, drop, rng)
        ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return matmul(ctx, p[f"{base}.attn.wo"]) + p[f"{base}.attn.ob"]

    def _ffn(self, x: Tensor, base: str, drop: float, rng) -> Tensor:
        y = gelu(self._linear(x, f"{base}.ffn.fc1"))
        if drop > 0.0:
            y = dropout(y, drop, rng)
        return self._linear(y, f"{base}.ffn.fc2")

    def _run_stack(self, prefix: str, x: Tensor, n_layers: int, bias: np.ndarray,
                   drop: float, rng,
                   injection: Optional[tuple[Tensor, Tensor]] = None) -> Tensor:
        for i in range(n_layers):
            base = f"{prefix}.l{i}"
            x = x + self._attention(self._ln(x, f"{base}.ln1"), base, bias, drop, rng)
            if injection is not None:
                z_sem, z_lang = injection
                inj = matmul(z_sem, self.params[f"{base}.inj_sem.w"]) + matmul(
                    z_lang, self.params[f"{base}.inj_lang.w"]
                )
                x = x + reshape(inj, (inj.shape[0], 1, inj.shape[1]))
            x = x + self._ffn(self._ln(x, f"{base}.ln2"), base, drop, rng)
        return self._ln(x, f"{prefix}.ln_f")

    def _embed_tokens(self, tokens: np.ndarray) -> Tensor:
        t = tokens.shape[1]
        if t > self.config.max_len:
            raise ShapeError(
                f"sequence length {t} exceeds max_len {self.config.max_len}"
            )
        x = embedding(self.params["token_emb"], tokens)
        pos = embedding(self.params["pos_emb"], np.arange(t))
        return x + pos

    def _pad_bias(self, mask: np.ndarray) -> np.ndarray:
        m = np.asarray(mask, dtype=self.dtype)
        return ((1.0 - m) * ATTN_NEG)[:, None, None, :].astype(self.dtype)

    def _posterior(self, pooled: Tensor, kind: str) -> GaussianPosterior:
        mu = self._linear(pooled, f"head.{kind}.mu")
        log_var = clamp(
            self._linear(pooled, f"head.{kind}.logvar"), LOG_VAR_MIN, LOG_VAR_MAX
        )
        return GaussianPosterior(mu, log_var)

    # ---------------- public forward passes ----------------

    def encode_semantic(self, tokens: np.ndarray, mask: np.ndarray,
                        dropout_rate: float = 0.0, rng=None) -> GaussianPosterior:
        """q(z_sem | x). Never sees a language id: language-agnostic by design."""
        x = self._embed_tokens(tokens)
        h = self._run_stack("enc_sem", x, self.config.n_enc_layers,
                            self._pad_bias(mask), dropout_rate, rng)
        return self._posterior(masked_mean_pool(h, mask), "sem")

    def encode_language(self, tokens: np.ndarray, mask: np.ndarray,
                        lang_ids: np.ndarray, dropout_rate: float = 0.0,
                        rng=None) -> GaussianPosterior:
        """q(z_l | x): language embedding added per token, per-language stack."""
        lang_ids = np.asarray(lang_ids)
        if lang_ids.size and (lang_ids.min() < 0 or lang_ids.max() >= self.config.n_languages):
            raise ConfigError(
                f"unknown language id in {sorted(set(int(x) for x in lang_ids.ravel()))}; "
                f"n_languages={self.config.n_languages}"
            )
        x = self._embed_tokens(tokens)
        if self.config.use_encoder_lang_emb:
            le = embedding(self.params["lang_emb"], lang_ids)
            x = x + reshape(le, (le.shape[0], 1, le.shape[1]))
        cfg = self.config
        if cfg.single_encoder:
            h = self._run_stack("enc_sem", x, cfg.n_enc_layers,
                                self._pad_bias(mask), dropout_rate, rng)
            return self._posterior(masked_mean_pool(h, mask), "lang")
        if cfg.n_language_encoders == 1:
            h = self._run_stack("enc_lang0", x, cfg.n_enc_layers,
                                self._pad_bias(mask), dropout_rate, rng)
            return self._posterior(masked_mean_pool(h, mask), "lang")
        # route batch rows to their assigned encoder stack, then merge
        b = tokens.shape[0]
        enc_idx = lang_ids % cfg.n_language_encoders
        pooled = None
        for e in sorted(set(int(i) for i in enc_idx)):
            rows = np.where(enc_idx == e)[0]
            sub = embedding(x, rows)  # differentiable row gather on the batch axis
            h = self._run_stack(f"enc_lang{e}", sub, cfg.n_enc_layers,
                                self._pad_bias(mask[rows]), dropout_rate, rng)
            part = put_rows(masked_mean_pool(h, mask[rows]), rows, b)
            pooled = part if pooled is None else pooled + part
        return self._posterior(pooled, "lang")

    def decode_logits(self, z_sem: Tensor, z_lang: Tensor, tokens: np.ndarray,
                      lang_ids: np.ndarray, mask: np.ndarray,
                      dropout_rate: float = 0.0, rng=None) -> Tensor:
        """Teacher-forced logits for predicting tokens[:, 1:].

        tokens is the full [BOS, w..., EOS, pad...] row; the decoder input is
        tokens[:, :-1] with position 0 replaced by the language embedding when
        use_decoder_lang_emb is set. Returns [B, T-1, V].
        """
        b, t = tokens.shape
        if t < 2:
            raise ShapeError("decode_logits needs at least [BOS, token] rows")
        cfg = self.config
        in_ids = tokens[:, :-1]
        in_mask = np.asarray(mask, dtype=self.dtype)[:, :-1]
        x = self._embed_tokens(in_ids)
        if cfg.use_decoder_lang_emb:
            lang_ids = np.asarray(lang_ids)
            if lang_ids.size and lang_ids.max() >= cfg.n_languages:
                raise ConfigError(
                    f"unknown language id {int(lang_ids.max())}; "
                    f"n_languages={cfg.n_languages}"
                )
            start = embedding(self.params["lang_emb"], lang_ids)
            start = reshape(start, (b, 1, start.shape[1]))
            keep = np.ones((1, t - 1, 1), dtype=self.dtype)
            keep[0, 0, 0] = 0.0
            x = x * Tensor(keep) + start * Tensor(1.0 - keep)
        tt = t - 1
        causal = np.where(
            np.arange(tt)[:, None] >= np.arange(tt)[None, :], 0.0, ATTN_NEG
        ).astype(self.dtype)[None, None, :, :]
        bias = causal + self._pad_bias(in_mask)
        h = self._run_stack("dec", x, cfg.n_dec_layers, bias, dropout_rate, rng,
                            injection=(z_sem, z_lang))
        zs = matmul(z_sem, self.params["out.map_sem.w"])
        zl = matmul(z_lang, self.params["out.map_lang.w"])
        d = cfg.model_dim
        zs3 = broadcast_to(reshape(zs, (b, 1, d)), (b, tt, d))
        zl3 = broadcast_to(reshape(zl, (b, 1, d)), (b, tt, d))
        c = concat([h, zs3, zl3], axis=-1)
        if cfg.factored_projection:
            return matmul(matmul(c, self.params["out.proj1.w"]), self.params["out.proj2.w"])
        return matmul(c, self.params["out.proj.w"])

    def embed_sentences(self, tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Sentence representations: the semantic posterior mean, no sampling."""
        return self.encode_semantic(tokens, mask).mu.data

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def parameter_count(self, prefix: str = "") -> int:
        return parameter_count(self.params, prefix)
