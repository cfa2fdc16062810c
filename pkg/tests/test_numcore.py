import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmsst.errors import (
    ContractError,
    EmptySequenceError,
    NumericalError,
    ShapeError,
)
from vmsst.numcore import (
    Tape,
    Tensor,
    backward,
    clamp,
    concat,
    cross_entropy_rows,
    dropout,
    embedding,
    gelu,
    grad_check,
    layer_norm,
    masked_mean_pool,
    matmul,
    parameter,
    reduce_mean,
    softmax,
    transpose,
)
from vmsst.numcore.tensor import record


def matmul_oracle(a, b):
    """Naive triple loop."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(a, Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_small_product_matches_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = matmul_oracle(a, b)
        np.testing.assert_array_equal(expected, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)

    def test_zero_annihilates(self):
        a = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
        out = matmul(a, Tensor(np.zeros((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @settings(max_examples=50, deadline=None)
    @given(
        m=st.integers(1, 16), k=st.integers(1, 16), n=st.integers(1, 16),
        seed=st.integers(0, 2**31),
    )
    def test_matches_triple_loop_oracle(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        np.testing.assert_allclose(
            matmul(Tensor(a), Tensor(b)).data, matmul_oracle(a, b), atol=1e-12
        )

    def test_batched_broadcast(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((5, 2, 3))
        b = rng.standard_normal((3, 4))
        out = matmul(Tensor(a), Tensor(b))
        assert out.shape == (5, 2, 4)
        for i in range(5):
            np.testing.assert_allclose(out.data[i], matmul_oracle(a[i], b), atol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_direct_exponentiation(self):
        # exp(ln 2) = 2, exp(0) = 1 -> [2/3, 1/3]
        out = softmax(Tensor([np.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_empty_axis_rejected(self):
        with pytest.raises(ShapeError):
            softmax(Tensor(np.ones((2, 0))))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), rows=st.integers(1, 5), n=st.integers(1, 9),
           shift=st.floats(-50, 50))
    def test_rows_sum_to_one_and_shift_invariant(self, seed, rows, n, shift):
        x = np.random.default_rng(seed).standard_normal((rows, n)) * 10
        out = softmax(Tensor(x)).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(rows), atol=1e-12)
        shifted = softmax(Tensor(x + shift)).data
        np.testing.assert_allclose(out, shifted, atol=1e-12)


class TestLayerNorm:
    def test_constant_row_maps_to_beta(self):
        out = layer_norm(Tensor([3.0, 3.0, 3.0]), Tensor(np.ones(3)),
                         Tensor(np.zeros(3)), eps=1e-5)
        np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-12)

    def test_already_normalized(self):
        out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), eps=1e-15)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-9)

    def test_hand_normalization(self):
        # mean 1, var 1 -> xhat [-1, 1] -> gamma*xhat + beta = [-1, 3]
        out = layer_norm(Tensor([0.0, 2.0]), Tensor([2.0, 2.0]), Tensor([1.0, 1.0]),
                         eps=1e-15)
        np.testing.assert_allclose(out.data, [-1.0, 3.0], atol=1e-9)

    def test_row_stats(self):
        x = np.random.default_rng(3).standard_normal((4, 8))
        out = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-12)
        np.testing.assert_allclose(out.data.mean(axis=-1), np.zeros(4), atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), np.ones(4), atol=1e-9)


class TestMaskedMeanPool:
    def test_identical_rows(self):
        h = np.tile([1.0, 2.0, 3.0], (4, 1))
        out = masked_mean_pool(Tensor(h), np.ones(4))
        np.testing.assert_allclose(out.data, [1.0, 2.0, 3.0])

    def test_singleton_position(self):
        h = np.arange(12.0).reshape(4, 3)
        mask = np.array([0.0, 0.0, 1.0, 0.0])
        np.testing.assert_array_equal(masked_mean_pool(Tensor(h), mask).data, h[2])

    def test_hand_average(self):
        h = np.array([[1.0, 3.0], [3.0, 5.0]])
        np.testing.assert_allclose(masked_mean_pool(Tensor(h), np.ones(2)).data, [2.0, 4.0])

    def test_all_zero_mask_rejected(self):
        with pytest.raises(EmptySequenceError):
            masked_mean_pool(Tensor(np.ones((3, 2))), np.zeros(3))
        with pytest.raises(EmptySequenceError):
            masked_mean_pool(Tensor(np.ones((2, 3, 2))),
                             np.array([[1.0, 0, 0], [0, 0, 0]]))


class TestBackward:
    def test_quadratic(self):
        w = parameter([1.0, 2.0])
        with Tape():
            loss = (w * w).sum()
            backward(loss)
        np.testing.assert_allclose(w.grad, [2.0, 4.0])

    def test_linear_matmul_grad_is_outer(self):
        rng = np.random.default_rng(0)
        w = parameter(rng.standard_normal((3, 4)))
        x = rng.standard_normal((4, 2))
        report = grad_check(lambda: matmul(w, Tensor(x)).sum(), {"w": w},
                            h=1e-6, tol=1e-9)
        assert report.passed, str(report)
        with Tape():
            loss = matmul(w, Tensor(x)).sum()
            w.zero_grad()
            backward(loss)
        np.testing.assert_allclose(w.grad, np.outer(np.ones(3), x.sum(axis=1)),
                                   atol=1e-12)

    def test_unreachable_parameter_gets_zero(self):
        w = parameter([1.0, 2.0])
        unused = parameter([5.0])
        with Tape():
            loss = (w * w).sum()
            backward(loss)
        np.testing.assert_array_equal(unused.grad_or_zeros(), [0.0])

    def test_non_scalar_rejected(self):
        w = parameter([1.0, 2.0])
        with Tape():
            y = w * 2.0
            with pytest.raises(ContractError):
                backward(y)

    def test_each_node_visited_exactly_once(self):
        w = parameter([1.0, 2.0, 3.0])
        with Tape() as tape:
            a = w * 2.0
            b = a + a          # diamond: a consumed twice
            c = (b * a).sum()  # a consumed a third time
            backward(c)
        assert len(tape.ops) > 0
        assert all(op.backward_visits == 1 for op in tape.ops)

    def test_grad_accumulates_through_reuse(self):
        w = parameter([3.0])
        with Tape():
            y = (w + w).sum()
            backward(y)
        np.testing.assert_allclose(w.grad, [2.0])

    def test_no_recording_outside_tape(self):
        w = parameter([1.0])
        y = w * 2.0
        assert y.node is None and not y.requires_grad


class TestSingleOpGradients:
    CASES = {
        "matmul": lambda w, rng: matmul(w, Tensor(rng.standard_normal((w.shape[1], 3)))).sum(),
        "softmax": lambda w, rng: (softmax(w, axis=-1)
                                   * Tensor(rng.standard_normal(w.shape))).sum(),
        "layer_norm": lambda w, rng: (layer_norm(w, Tensor(rng.standard_normal(w.shape[-1])),
                                                 Tensor(rng.standard_normal(w.shape[-1])),
                                                 1e-3)
                                      * Tensor(rng.standard_normal(w.shape))).sum(),
        "gelu": lambda w, rng: (gelu(w) * Tensor(rng.standard_normal(w.shape))).sum(),
        "pool": lambda w, rng: (masked_mean_pool(w, np.array([1.0, 0.0, 1.0, 1.0]))
                                * Tensor(rng.standard_normal(w.shape[-1]))).sum(),
        "mul_broadcast": lambda w, rng: (w * Tensor(rng.standard_normal(w.shape[-1]))).sum(),
        "div": lambda w, rng: (w / Tensor(2.0 + rng.random(w.shape))).sum(),
        "mean": lambda w, rng: reduce_mean(w * w, axis=-1).sum(),
        "concat": lambda w, rng: (concat([w, w * 2.0], axis=0)
                                  * Tensor(rng.standard_normal((8, w.shape[1])))).sum(),
        "transpose": lambda w, rng: (transpose(w, (1, 0))
                                     * Tensor(rng.standard_normal(w.shape[::-1]))).sum(),
        "clamp": lambda w, rng: (clamp(w, -0.5, 0.5)
                                 * Tensor(rng.standard_normal(w.shape))).sum(),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_op_gradient(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        w = parameter(rng.standard_normal((4, 5)))
        fn = self.CASES[name]
        report = grad_check(lambda: fn(w, np.random.default_rng(7)), {"w": w},
                            h=1e-5, tol=1e-6)
        assert report.passed, f"{name}: {report}"

    def test_embedding_gradient_scatter_adds(self):
        table = parameter(np.random.default_rng(0).standard_normal((6, 3)))
        ids = np.array([0, 2, 2, 5])
        with Tape():
            loss = embedding(table, ids).sum()
            backward(loss)
        expected = np.zeros((6, 3))
        np.add.at(expected, ids, 1.0)
        np.testing.assert_array_equal(table.grad, expected)

    def test_cross_entropy_matches_log_softmax_oracle(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((3, 7))
        targets = np.array([2, 0, 6])
        out = cross_entropy_rows(Tensor(logits), targets).data
        # brute-force log-softmax oracle
        ls = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        expected = -ls[np.arange(3), targets]
        np.testing.assert_allclose(out, expected, rtol=1e-10)

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(6)
        w = parameter(rng.standard_normal((4, 5)))
        targets = np.array([1, 0, 3, 2])
        report = grad_check(
            lambda: reduce_mean(cross_entropy_rows(w, targets)), {"w": w},
            h=1e-6, tol=1e-6,
        )
        assert report.passed, str(report)


class TestDropoutAndDtype:
    def test_dropout_deterministic_and_scaled(self):
        x = Tensor(np.ones((100, 10)))
        a = dropout(x, 0.3, np.random.default_rng(0)).data
        b = dropout(x, 0.3, np.random.default_rng(0)).data
        np.testing.assert_array_equal(a, b)
        kept = a[a != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.7)

    def test_dropout_zero_rate_is_identity(self):
        x = Tensor(np.ones(4))
        assert dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_float32_preserved(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))
        assert (x * 2.0).dtype == np.float32
        assert softmax(x).dtype == np.float32
        assert matmul(x, x).dtype == np.float32


class TestGradCheckHarness:
    def test_linear_function_is_exact(self):
        # power-of-two coefficients and step: the central difference of an
        # affine map incurs no rounding at all
        w = parameter(np.array([1.0, -2.0, 3.0]))
        c = np.array([2.0, 0.5, -1.0])
        report = grad_check(lambda: (w * Tensor(c)).sum(), {"w": w}, h=2.0**-7,
                            tol=1e-12)
        assert report.passed
        assert report.max_rel_error <= 1e-12

    def test_corrupted_backward_rule_detected(self):
        def bad_square(x):
            # deliberately wrong backward: 3x instead of 2x
            return record("bad_square", (x,), x.data**2, lambda g: (g * 3.0 * x.data,))

        w = parameter(np.array([0.7, -1.3]))
        report = grad_check(lambda: bad_square(w).sum(), {"w": w}, h=1e-5, tol=1e-4)
        assert not report.passed

    def test_non_finite_probe_names_parameter(self):
        w = parameter(np.array([1e-6]))

        def f():
            from vmsst.numcore import log

            return log(w).sum()

        # probing w - h goes negative -> log returns nan
        with pytest.raises(NumericalError, match="w"):
            grad_check(f, {"w": w}, h=1e-5, tol=1e-4)
