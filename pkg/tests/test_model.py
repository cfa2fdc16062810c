import numpy as np
import pytest

from vmsst.checkpoint import load_checkpoint, save_checkpoint
from vmsst.errors import ConfigError, FormatError, ShapeError
from vmsst.evalkit import read_embeddings, write_embeddings
from vmsst.model import (
    GaussianPosterior,
    Model,
    ModelConfig,
    init_parameters,
    reparameterize,
)
from vmsst.numcore import Tensor


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=23, model_dim=16, latent_dim=4, n_enc_layers=2, n_dec_layers=2,
        n_heads=2, ff_dim=16, n_languages=3, max_len=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_tokens(rng, b, t, vocab_size, max_len=None):
    tokens = rng.integers(4, vocab_size, size=(b, t)).astype(np.int64)
    tokens[:, 0] = 1  # BOS
    mask = np.ones((b, t), dtype=np.float32)
    for i in range(b):
        length = int(rng.integers(3, t + 1))
        tokens[i, length - 1] = 2  # EOS
        tokens[i, length:] = 0
        mask[i, length:] = 0.0
    return tokens, mask


class TestModelConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError, match="n_heads"):
            tiny_config(model_dim=10, n_heads=4)

    def test_language_encoder_bounds(self):
        with pytest.raises(ConfigError, match="n_language_encoders"):
            tiny_config(n_language_encoders=5)

    def test_round_robin_assignment(self):
        cfg = tiny_config(n_languages=5, n_language_encoders=2)
        assert [cfg.language_encoder_index(l) for l in range(5)] == [0, 1, 0, 1, 0]

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="bogus"):
            ModelConfig.from_dict({**tiny_config().to_dict(), "bogus": 1})


class TestEncodeSemantic:
    def test_zero_heads_give_zero_posterior(self):
        model = Model.create(tiny_config(), seed=0, dtype=np.float64)
        for name in ("head.sem.mu.w", "head.sem.mu.b", "head.sem.logvar.w",
                     "head.sem.logvar.b"):
            model.params[name].data[:] = 0.0
        tokens, mask = random_tokens(np.random.default_rng(0), 3, 6, 23)
        post = model.encode_semantic(tokens, mask)
        np.testing.assert_array_equal(post.mu.data, np.zeros((3, 4)))
        np.testing.assert_array_equal(post.log_var.data, np.zeros((3, 4)))

    def test_function_of_tokens_only(self):
        # the semantic encoder never receives a language id
        model = Model.create(tiny_config(), seed=1, dtype=np.float64)
        tokens, mask = random_tokens(np.random.default_rng(1), 2, 6, 23)
        a = model.encode_semantic(tokens, mask)
        b = model.encode_semantic(tokens.copy(), mask.copy())
        np.testing.assert_array_equal(a.mu.data, b.mu.data)
        np.testing.assert_array_equal(a.log_var.data, b.log_var.data)

    def test_shapes_and_finite(self):
        model = Model.create(tiny_config(), seed=2, dtype=np.float64)
        tokens, mask = random_tokens(np.random.default_rng(2), 5, 7, 23)
        post = model.encode_semantic(tokens, mask)
        assert post.mu.shape == (5, 4) and post.log_var.shape == (5, 4)
        assert np.all(np.isfinite(post.mu.data))
        assert np.all(np.isfinite(post.log_var.data))

    def test_padding_does_not_change_embeddings(self):
        # mathematically exact (masked keys get zero attention weight and are
        # pooled out); BLAS shape-dependent rounding leaves ulp-level noise
        model = Model.create(tiny_config(), seed=3, dtype=np.float64)
        tokens, mask = random_tokens(np.random.default_rng(3), 2, 5, 23)
        padded = np.zeros((2, 8), dtype=np.int64)
        padded[:, :5] = tokens
        pmask = np.zeros((2, 8), dtype=np.float32)
        pmask[:, :5] = mask
        np.testing.assert_allclose(
            model.embed_sentences(tokens, mask), model.embed_sentences(padded, pmask),
            rtol=1e-12, atol=1e-12,
        )


class TestEncodeLanguage:
    def test_no_lang_emb_single_encoder_ignores_lang_id(self):
        model = Model.create(tiny_config(use_encoder_lang_emb=False), seed=4,
                             dtype=np.float64)
        tokens, mask = random_tokens(np.random.default_rng(4), 3, 6, 23)
        outs = [
            model.encode_language(tokens, mask, np.full(3, lang)).mu.data
            for lang in range(3)
        ]
        np.testing.assert_array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(outs[0], outs[2])

    def test_lang_emb_changes_output(self):
        model = Model.create(tiny_config(), seed=4, dtype=np.float64)
        tokens, mask = random_tokens(np.random.default_rng(4), 3, 6, 23)
        a = model.encode_language(tokens, mask, np.full(3, 0)).mu.data
        b = model.encode_language(tokens, mask, np.full(3, 1)).mu.data
        assert not np.array_equal(a, b)

    def test_two_encoders_are_independent(self):
        cfg = tiny_config(n_language_encoders=2, use_encoder_lang_emb=False)
        model = Model.create(cfg, seed=5, dtype=np.float64)
        assert any(n.startswith("enc_lang0.") for n in model.params)
        assert any(n.startswith("enc_lang1.") for n in model.params)
        tokens, mask = random_tokens(np.random.default_rng(5), 2, 6, 23)
        before = model.encode_language(tokens, mask, np.zeros(2, dtype=int)).mu.data
        # perturbing encoder 1 must not affect languages routed to encoder 0
        for name, p in model.params.items():
            if name.startswith("enc_lang1."):
                p.data += 1.0
        after = model.encode_language(tokens, mask, np.zeros(2, dtype=int)).mu.data
        np.testing.assert_array_equal(before, after)
        b1 = model.encode_language(tokens, mask, np.ones(2, dtype=int)).mu.data
        assert not np.array_equal(before, b1)

    def test_mixed_batch_routing_matches_single_language_calls(self):
        cfg = tiny_config(n_language_encoders=2)
        model = Model.create(cfg, seed=6, dtype=np.float64)
        tokens, mask = random_tokens(np.random.default_rng(6), 4, 6, 23)
        langs = np.array([0, 1, 2, 1])
        mixed = model.encode_language(tokens, mask, langs).mu.data
        for i in range(4):
            single = model.encode_language(tokens[i : i + 1], mask[i : i + 1],
                                           langs[i : i + 1]).mu.data
            np.testing.assert_allclose(mixed[i], single[0], atol=1e-12)

    def test_unknown_language_rejected(self):
        model = Model.create(tiny_config(), seed=7, dtype=np.float64)
        tokens, mask = random_tokens(np.random.default_rng(7), 2, 5, 23)
        with pytest.raises(ConfigError, match="language"):
            model.encode_language(tokens, mask, np.array([0, 7]))


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        post = GaussianPosterior(Tensor([[1.0, -2.0]]), Tensor([[0.3, -0.7]]))
        z = reparameterize(post, np.zeros((1, 2)))
        np.testing.assert_array_equal(z.data, [[1.0, -2.0]])

    def test_unit_variance_adds_noise(self):
        post = GaussianPosterior(Tensor([[1.0, 2.0]]), Tensor([[0.0, 0.0]]))
        e = np.array([[0.5, -1.5]])
        np.testing.assert_allclose(reparameterize(post, e).data, [[1.5, 0.5]])

    def test_monte_carlo_mean(self):
        n = 10**6
        mu = np.array([[0.7, -1.2]])
        log_var = np.array([[0.5, -1.0]])
        post = GaussianPosterior(Tensor(mu), Tensor(log_var))
        noise = np.random.default_rng(11).standard_normal((n, 2))
        draws = reparameterize(post, noise).data
        sigma = np.exp(0.5 * log_var[0])
        bound = 4.0 * sigma / np.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - mu[0]) < bound)


class TestDecoder:
    def test_zero_parameters_give_uniform_logits(self):
        cfg = tiny_config()
        model = Model.create(cfg, seed=8, dtype=np.float64)
        for p in model.params.values():
            p.data[:] = 0.0
        tokens, mask = random_tokens(np.random.default_rng(8), 2, 6, 23)
        z = Tensor(np.random.default_rng(9).standard_normal((2, 4)))
        logits = model.decode_logits(z, z, tokens, np.zeros(2, dtype=int), mask)
        np.testing.assert_array_equal(logits.data, np.zeros_like(logits.data))
        probs = np.exp(logits.data) / np.exp(logits.data).sum(-1, keepdims=True)
        np.testing.assert_allclose(probs, 1.0 / cfg.vocab_size)

    def test_factored_projection_parameter_count(self):
        d, v = 16, 23
        full = Model.create(tiny_config(factored_projection=False), seed=0)
        fact = Model.create(tiny_config(factored_projection=True), seed=0)
        assert full.parameter_count("out.proj") == 3 * d * v
        assert fact.parameter_count("out.proj") == d * v + 3 * d * d
        diff = full.parameter_count("out.proj") - fact.parameter_count("out.proj")
        assert diff == 3 * d * v - (d * v + 3 * d * d)

    @pytest.mark.parametrize("n_dec_layers", [1, 2])
    def test_causality(self, n_dec_layers):
        model = Model.create(tiny_config(n_dec_layers=n_dec_layers), seed=10,
                             dtype=np.float64)
        rng = np.random.default_rng(10)
        tokens = rng.integers(4, 23, size=(1, 7)).astype(np.int64)
        tokens[0, 0] = 1
        mask = np.ones((1, 7), dtype=np.float32)
        z = Tensor(rng.standard_normal((1, 4)))
        langs = np.zeros(1, dtype=int)
        base = model.decode_logits(z, z, tokens, langs, mask).data
        for t in range(1, 7):  # target positions are tokens[:, 1:]
            perturbed = tokens.copy()
            perturbed[0, t] = 4 + (perturbed[0, t] - 4 + 1) % 19
            out = model.decode_logits(z, z, perturbed, langs, mask).data
            # logits index p sees decoder inputs tokens[:p+1]; changing
            # tokens[t] only reaches logits from index t onward
            np.testing.assert_array_equal(out[0, :t], base[0, :t])
            if t < 6:
                assert not np.array_equal(out[0, t:], base[0, t:])
            else:
                # the final target token is a label only, never an input
                np.testing.assert_array_equal(out, base)

    def test_language_start_token_used_when_enabled(self):
        model = Model.create(tiny_config(), seed=11, dtype=np.float64)
        tokens, mask = random_tokens(np.random.default_rng(11), 2, 6, 23)
        z = Tensor(np.random.default_rng(12).standard_normal((2, 4)))
        a = model.decode_logits(z, z, tokens, np.zeros(2, dtype=int), mask).data
        b = model.decode_logits(z, z, tokens, np.ones(2, dtype=int), mask).data
        assert not np.array_equal(a, b)
        off = Model(tiny_config(use_decoder_lang_emb=False), model.params)
        a2 = off.decode_logits(z, z, tokens, np.zeros(2, dtype=int), mask).data
        b2 = off.decode_logits(z, z, tokens, np.ones(2, dtype=int), mask).data
        np.testing.assert_array_equal(a2, b2)

    def test_length_error(self):
        model = Model.create(tiny_config(max_len=4), seed=12)
        tokens = np.ones((1, 6), dtype=np.int64)
        with pytest.raises(ShapeError, match="max_len"):
            model.decode_logits(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))),
                                tokens, np.zeros(1, dtype=int),
                                np.ones((1, 6), dtype=np.float32))


class TestSingleEncoderAblation:
    def test_shared_stack_with_separate_heads(self):
        twin = Model.create(tiny_config(), seed=13)
        single = Model.create(tiny_config(single_encoder=True), seed=13)
        assert single.parameter_count() < twin.parameter_count()
        assert not any(n.startswith("enc_lang") for n in single.params)
        tokens, mask = random_tokens(np.random.default_rng(13), 2, 6, 23)
        sem = single.encode_semantic(tokens, mask)
        lang = single.encode_language(tokens, mask, np.zeros(2, dtype=int))
        assert not np.array_equal(sem.mu.data, lang.mu.data)


class TestLogVarClamp:
    def test_exp_half_log_var_bounded(self):
        model = Model.create(tiny_config(), seed=14, dtype=np.float64)
        model.params["head.sem.logvar.w"].data *= 1e4
        model.params["head.sem.logvar.b"].data += 37.0
        tokens, mask = random_tokens(np.random.default_rng(14), 4, 6, 23)
        post = model.encode_semantic(tokens, mask)
        std = np.exp(0.5 * post.log_var.data)
        assert np.all(std <= np.exp(5.0))
        assert np.all(std >= np.exp(-5.0))


class TestEmbedSentences:
    def test_equals_posterior_mean(self):
        model = Model.create(tiny_config(), seed=15, dtype=np.float64)
        tokens, mask = random_tokens(np.random.default_rng(15), 3, 6, 23)
        np.testing.assert_array_equal(
            model.embed_sentences(tokens, mask),
            model.encode_semantic(tokens, mask).mu.data,
        )

    def test_deterministic(self):
        model = Model.create(tiny_config(), seed=16)
        tokens, mask = random_tokens(np.random.default_rng(16), 3, 6, 23)
        a = model.embed_sentences(tokens, mask)
        b = model.embed_sentences(tokens, mask)
        np.testing.assert_array_equal(a, b)

    def test_vmsb_round_trip_bit_exact(self, tmp_path):
        model = Model.create(tiny_config(), seed=17)  # float32 default
        tokens, mask = random_tokens(np.random.default_rng(17), 4, 6, 23)
        emb = model.embed_sentences(tokens, mask)
        path = tmp_path / "e.vmsb"
        write_embeddings(path, emb)
        back = read_embeddings(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, emb)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        model = Model.create(tiny_config(), seed=18)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, model, step=3)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded.model, step=loaded.step)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_reproduces_forward_bitwise(self, tmp_path):
        model = Model.create(tiny_config(), seed=19)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path).model
        tokens, mask = random_tokens(np.random.default_rng(19), 3, 6, 23)
        np.testing.assert_array_equal(
            model.embed_sentences(tokens, mask),
            loaded.embed_sentences(tokens, mask),
        )

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_archive_rejected(self, tmp_path):
        model = Model.create(tiny_config(), seed=20)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) - 100])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_trailing_garbage_rejected(self, tmp_path):
        model = Model.create(tiny_config(), seed=21)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)

    def test_stable_names_across_save_load(self, tmp_path):
        model = Model.create(tiny_config(), seed=22)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path).model
        assert sorted(loaded.params) == sorted(model.params)


class TestParameterInit:
    def test_deterministic_given_seed(self):
        a = init_parameters(tiny_config(), np.random.default_rng(5))
        b = init_parameters(tiny_config(), np.random.default_rng(5))
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_all_finite(self):
        params = init_parameters(tiny_config(), np.random.default_rng(6))
        assert all(np.all(np.isfinite(p.data)) for p in params.values())
