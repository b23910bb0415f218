"""Tensor core: op semantics against independent oracles, autodiff
against finite differences, serialization round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlsa4rec import tensor as T
from mlsa4rec.tensor import (NumericsError, ParameterStore, ShapeError,
                             Tensor, grad_check)


def tensor64(arr, requires_grad=True):
    t = Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)
    if requires_grad:
        t.grad = np.zeros_like(t.data)
    return t


def numeric_grad(f, x, eps=1e-6):
    """Central differences on a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_unary(op, x, seed=0, **kwargs):
    """Compare analytic input gradient of sum(op(x)) to finite differences."""
    rng = np.random.default_rng(seed)
    xt = tensor64(x)
    out = op(xt, **kwargs)
    w = rng.standard_normal(out.shape)  # random linear functional
    T.tsum(T.mul(out, Tensor(w))).backward()

    def f():
        with T.no_grad():
            return float((op(xt, **kwargs).data * w).sum())

    fd = numeric_grad(f, xt.data)
    np.testing.assert_allclose(xt.grad, fd, rtol=1e-5, atol=1e-7)


class TestMatmul:
    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        expect = np.zeros((3, 5))
        for i in range(3):
            for j in range(5):
                for k in range(4):
                    expect[i, j] += a[i, k] * b[k, j]
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, expect, rtol=1e-6)

    def test_batched_matches_per_batch(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 5))
        got = T.matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            np.testing.assert_allclose(got[i], a[i] @ b[i], rtol=1e-6)

    def test_batched_shared_right(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, a @ b, rtol=1e-6)

    def test_rejects_inner_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_rejects_2d_left_3d_right(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3, 5))))

    def test_grad_all_cases(self):
        rng = np.random.default_rng(3)
        for sa, sb in (((3, 4), (4, 2)), ((2, 3, 4), (4, 2)),
                       ((2, 3, 4), (2, 4, 2))):
            a = tensor64(rng.standard_normal(sa))
            b = tensor64(rng.standard_normal(sb))
            T.tsum(T.matmul(a, b)).backward()

            def f(a=a, b=b):
                with T.no_grad():
                    return float(T.matmul(a, b).data.sum())

            np.testing.assert_allclose(a.grad, numeric_grad(f, a.data),
                                       rtol=1e-5, atol=1e-8)
            np.testing.assert_allclose(b.grad, numeric_grad(f, b.data),
                                       rtol=1e-5, atol=1e-8)


class TestElementwise:
    def test_add_bias_broadcast(self):
        x = Tensor(np.ones((2, 3, 4)))
        b = Tensor(np.arange(4.0))
        out = T.add(x, b)
        np.testing.assert_allclose(
            out.data, np.broadcast_to(1.0 + np.arange(4.0), (2, 3, 4)))

    def test_mul_vector_broadcast_grad(self):
        rng = np.random.default_rng(4)
        x = tensor64(rng.standard_normal((2, 3)))
        v = tensor64(rng.standard_normal(3))
        T.tsum(T.mul(x, v)).backward()
        np.testing.assert_allclose(v.grad, x.data.sum(axis=0), rtol=1e-6)

    def test_shared_gradient_buffer_not_corrupted(self):
        # add() hands the same upstream array to both parents; ensure
        # accumulation elsewhere cannot alias-corrupt either branch
        x = tensor64(np.ones(3))
        y = T.add(x, x)       # dy/dx contributions arrive twice
        z = T.add(y, x)       # and once more via a second path
        T.tsum(z).backward()
        np.testing.assert_allclose(x.grad, np.full(3, 3.0))

    def test_unary_grads(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 4))
        for op in (T.silu, T.gelu, T.sigmoid, T.softplus, T.exp):
            check_unary(op, x * 0.7)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(6)
        out = T.softmax(Tensor(rng.standard_normal((5, 7))), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_softmax_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 6))
        naive = np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True)
        got = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(got, naive, rtol=1e-6)

    def test_softmax_grad(self):
        rng = np.random.default_rng(8)
        check_unary(lambda t: T.softmax(t, axis=-1),
                    rng.standard_normal((3, 5)))

    def test_softmax_stable_at_large_logits(self):
        out = T.softmax(Tensor(np.array([[1000.0, 1000.0, 0.0]])), axis=-1).data
        np.testing.assert_allclose(out[0, :2], 0.5, atol=1e-6)

    def test_gelu_exact_form(self):
        from scipy.special import erf
        x = np.linspace(-3, 3, 13)
        expect = x * 0.5 * (1 + erf(x / np.sqrt(2)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, expect, rtol=1e-6)


class TestLayernorm:
    def test_standardizes_rows(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 8)) * 3 + 2
        d = x.shape[-1]
        out = T.layernorm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_grad(self):
        rng = np.random.default_rng(10)
        x = tensor64(rng.standard_normal((3, 6)))
        g = tensor64(rng.standard_normal(6))
        b = tensor64(rng.standard_normal(6))
        w = rng.standard_normal((3, 6))
        T.tsum(T.mul(T.layernorm(x, g, b), Tensor(w))).backward()

        def f():
            with T.no_grad():
                return float((T.layernorm(x, g, b).data * w).sum())

        for t in (x, g, b):
            np.testing.assert_allclose(t.grad, numeric_grad(f, t.data),
                                       rtol=1e-4, atol=1e-7)

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ValueError):
            T.layernorm(Tensor(np.ones((2, 3))), Tensor(np.ones(3)),
                        Tensor(np.zeros(3)), eps=0.0)


class TestEmbeddingAndStructure:
    def test_embedding_lookup_and_grad(self):
        table = tensor64(np.arange(12.0).reshape(4, 3))
        ids = np.array([[1, 1, 3], [0, 2, 2]])
        out = T.embedding(table, ids)
        np.testing.assert_allclose(out.data[0, 0], table.data[1])
        T.tsum(out).backward()
        # row 1 hit twice, row 2 twice, rows 0 and 3 once
        np.testing.assert_allclose(table.grad[:, 0], [1, 2, 2, 1])

    def test_embedding_rejects_out_of_range(self):
        with pytest.raises(IndexError):
            T.embedding(Tensor(np.ones((4, 3))), np.array([4]))

    def test_concat_slice_roundtrip(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 6))
        t = Tensor(x)
        back = T.concat_last([T.slice_last(t, 0, 2), T.slice_last(t, 2, 6)])
        np.testing.assert_array_equal(back.data, x)

    def test_take_row(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        np.testing.assert_array_equal(T.take_row(Tensor(x), 2).data, x[:, 2, :])

    def test_transpose_grad(self):
        rng = np.random.default_rng(12)
        check_unary(T.transpose_last, rng.standard_normal((2, 3, 4)))

    def test_rank_cap(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1)))


class TestGraphMechanics:
    def test_backward_requires_scalar(self):
        x = tensor64(np.ones(3))
        with pytest.raises(ShapeError):
            T.mul(x, x).backward()

    def test_no_grad_blocks_taping(self):
        x = tensor64(np.ones(3))
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y._parents == ()

    def test_diamond_graph_accumulates(self):
        x = tensor64(np.array([2.0]))
        y = T.mul(x, x)                 # x^2
        z = T.tsum(T.add(y, y))         # 2 x^2; dz/dx = 4x = 8
        z.backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_nan_raises_numerics_error(self):
        with np.errstate(over="ignore"), pytest.raises(NumericsError):
            T.exp(Tensor(np.array([1e30], dtype=np.float64)))

    def test_dropout_modes(self):
        rng = np.random.default_rng(13)
        x = Tensor(np.ones((100,)))
        assert T.dropout(x, 0.5, rng, training=False) is x
        out = T.dropout(x, 0.5, rng, training=True).data
        kept = out[out > 0]
        np.testing.assert_allclose(kept, 2.0)  # inverted scaling
        assert 20 < (out == 0).sum() < 80

    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_softmax_distribution_property(self, vals):
        out = T.softmax(Tensor(np.array([vals])), axis=-1).data
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) < 1e-5


class TestCrossEntropy:
    def test_uniform_logits_closed_form(self):
        loss = T.cross_entropy(Tensor(np.zeros(100)), 7)
        np.testing.assert_allclose(loss.data, np.log(100), rtol=1e-6)

    def test_saturated_target(self):
        logits = np.zeros(50)
        logits[3] = 1000.0
        assert float(T.cross_entropy(Tensor(logits), 3).data) < 1e-6

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(14)
        logits = rng.standard_normal(30)
        naive = -np.log(np.exp(logits)[11] / np.exp(logits).sum())
        got = float(T.cross_entropy(Tensor(logits.astype(np.float64)), 11).data)
        np.testing.assert_allclose(got, naive, rtol=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            logits = Tensor(rng.standard_normal((3, 9)))
            assert float(T.cross_entropy(logits, [1, 2, 3]).data) >= 0.0

    def test_rejects_padding_target(self):
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(np.zeros(5)), 0)

    def test_grad(self):
        rng = np.random.default_rng(16)
        x = tensor64(rng.standard_normal((2, 7)))
        T.cross_entropy(x, [3, 1]).backward()

        def f():
            with T.no_grad():
                return float(T.cross_entropy(x, [3, 1]).data)

        np.testing.assert_allclose(x.grad, numeric_grad(f, x.data),
                                   rtol=1e-5, atol=1e-9)


class TestParameterStore:
    def test_rejects_duplicates(self):
        store = ParameterStore(0)
        store.zeros("a", (2,))
        with pytest.raises(ValueError):
            store.zeros("a", (2,))

    def test_uniform_init_bounds(self):
        store = ParameterStore(0)
        t = store.uniform("w", (50, 50), fan_in=25)
        assert np.all(np.abs(t.data) <= 0.2)

    def test_zero_grads_and_counts(self):
        store = ParameterStore(0)
        store.zeros("a", (2, 3))
        store.zeros("b", (4,))
        store["a"].grad += 1.0
        store.zero_grads()
        assert store["a"].grad.sum() == 0.0
        assert store.num_params() == 10

    def test_snapshot_load_roundtrip(self):
        store = ParameterStore(1)
        store.uniform("w", (3, 3), 3)
        snap = store.snapshot()
        store["w"].data += 5.0
        store.load_values(snap)
        np.testing.assert_array_equal(store["w"].data, snap["w"])

    def test_load_rejects_unknown_and_mismatch(self):
        store = ParameterStore(0)
        store.zeros("w", (2,))
        with pytest.raises(KeyError):
            store.load_values({"nope": np.zeros(2)})
        with pytest.raises(ShapeError):
            store.load_values({"w": np.zeros(3)})

    def test_astype_copies_values(self):
        store = ParameterStore(0)
        store.uniform("w", (4,), 4)
        s64 = store.astype(np.float64)
        assert s64["w"].data.dtype == np.float64
        np.testing.assert_allclose(s64["w"].data, store["w"].data, rtol=1e-7)
        s64["w"].data += 1.0
        assert not np.allclose(s64["w"].data, store["w"].data)


class TestGradCheckHarness:
    def test_passes_on_correct_graph(self):
        store = ParameterStore(0, dtype=np.float64)
        store.uniform("w", (4, 4), 4)
        store.uniform("b", (4,), 4)
        x = np.random.default_rng(17).standard_normal((2, 4))

        def f(s):
            return T.tsum(T.silu(T.add(T.matmul(Tensor(x), s["w"]), s["b"])))

        assert grad_check(f, store, n_samples=20) < 1e-6

    def test_requires_float64(self):
        store = ParameterStore(0)
        store.zeros("w", (2,))
        with pytest.raises(ValueError):
            grad_check(lambda s: T.tsum(s["w"]), store)

    def test_flags_wrong_gradient(self):
        store = ParameterStore(0, dtype=np.float64)
        w = store.uniform("w", (3,), 3)

        def wrong(g):
            return (0.5 * g,)  # deliberately wrong backward

        def f(s):
            return T.make_op(np.asarray(s["w"].data.sum()), (s["w"],),
                             wrong, "bad_sum")

        assert grad_check(f, store, n_samples=3) > 0.3
