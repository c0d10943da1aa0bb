import numpy as np
import pytest

from corrpolicy.nncore import (
    AdamW,
    CheckpointError,
    Tensor,
    adamw_step,
    add,
    backward,
    concat,
    init_attention,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    load_checkpoint,
    matmul,
    max_pool,
    mse,
    multi_head_cross_attention,
    relu,
    reshape,
    save_checkpoint,
    scale,
    sigmoid,
    slice_,
    softmax,
    transpose,
)
from gradtools import check_gradients


def t64(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


class TestForward:
    def test_matmul_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((4, 4)))
        np.testing.assert_array_equal(matmul(Tensor(np.eye(4)), x).data, x.data)

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ValueError, match="matmul"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_relu_definition(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_values(self):
        out = sigmoid(Tensor(np.array([0.0, 100.0, -100.0])))
        np.testing.assert_allclose(out.data, [0.5, 1.0, 0.0], atol=1e-12)

    def test_layer_norm_constant_vector(self):
        gain, bias = init_layer_norm(5, dtype=np.float64)
        out = layer_norm(Tensor(np.full((3, 5), 2.5)), gain, bias)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = softmax(Tensor(rng.standard_normal((6, 9))), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_mixed_dtype_rejected(self):
        a = Tensor(np.zeros((2, 2), dtype=np.float32))
        b = Tensor(np.zeros((2, 2), dtype=np.float64))
        with pytest.raises(ValueError, match="dtype"):
            add(a, b)

    def test_add_bias_broadcast_only(self):
        a = Tensor(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="add"):
            add(a, Tensor(np.zeros((2, 1))))

    def test_max_pool_values(self):
        x = Tensor(np.array([[1.0, 5.0, 3.0], [4.0, 0.0, 2.0]]))
        np.testing.assert_array_equal(max_pool(x, axis=0).data, [4.0, 5.0, 3.0])


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        loss = scale(mse(x, Tensor(np.zeros(3))), 3.0)  # = sum(x^2)
        backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            backward(relu(x))

    def test_repeated_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = mse(x, Tensor(np.zeros(3)))
        backward(loss)
        with pytest.raises(RuntimeError):
            backward(loss)

    def test_detached_tensor_gets_no_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        d = x.detach()
        loss = mse(d, Tensor(np.zeros(3)))
        backward(loss)
        assert x.grad is None and d.grad is None

    def test_grad_accumulates_across_uses(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        loss = mse(add(x, x), Tensor(np.zeros(1)))  # (2x)^2 -> d/dx = 8x
        backward(loss)
        np.testing.assert_allclose(x.grad, [16.0])


class TestGradientChecks:
    """Every differentiable op against central finite differences, 5 shapes each."""

    SEEDS = [0, 1, 2, 3, 4]

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        n, k, m = rng.integers(2, 5, 3)
        p = {"a": t64(rng, n, k), "b": t64(rng, k, m)}
        check_gradients(lambda q: mse(matmul(q["a"], q["b"]), Tensor(np.zeros((n, m)))), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul_batched(self, seed):
        rng = np.random.default_rng(seed)
        p = {"a": t64(rng, 2, 3, 4), "b": t64(rng, 2, 4, 2)}
        check_gradients(lambda q: mse(matmul(q["a"], q["b"]), Tensor(np.zeros((2, 3, 2)))), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_add_and_bias(self, seed):
        rng = np.random.default_rng(seed)
        p = {"a": t64(rng, 3, 4), "b": t64(rng, 3, 4), "bias": t64(rng, 4)}
        check_gradients(
            lambda q: mse(add(add(q["a"], q["b"]), q["bias"]), Tensor(np.zeros((3, 4)))), p
        )

    @pytest.mark.parametrize("seed", SEEDS)
    def test_scale(self, seed):
        rng = np.random.default_rng(seed)
        p = {"a": t64(rng, 4, 3)}
        check_gradients(lambda q: scale(mse(q["a"], Tensor(np.zeros((4, 3)))), -1.7), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu(self, seed):
        rng = np.random.default_rng(seed)
        data = rng.standard_normal((4, 4))
        data[np.abs(data) < 0.1] += 0.5  # keep away from the kink
        p = {"a": Tensor(data, requires_grad=True)}
        check_gradients(lambda q: mse(relu(q["a"]), Tensor(np.zeros((4, 4)))), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_sigmoid(self, seed):
        rng = np.random.default_rng(seed)
        p = {"a": t64(rng, 5)}
        check_gradients(lambda q: mse(sigmoid(q["a"]), Tensor(np.zeros(5))), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax(self, seed):
        rng = np.random.default_rng(seed)
        tgt = Tensor(np.abs(rng.standard_normal((3, 5))))
        p = {"a": t64(rng, 3, 5)}
        check_gradients(lambda q: mse(softmax(q["a"], axis=-1), tgt), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        tgt = Tensor(rng.standard_normal((4, 6)))
        p = {"x": t64(rng, 4, 6), "g": t64(rng, 6), "b": t64(rng, 6)}
        check_gradients(lambda q: mse(layer_norm(q["x"], q["g"], q["b"]), tgt), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_max_pool(self, seed):
        rng = np.random.default_rng(seed)
        # Distinct values keep the argmax stable under the FD perturbation.
        data = rng.permutation(24).astype(np.float64).reshape(4, 6)
        p = {"a": Tensor(data, requires_grad=True)}
        check_gradients(lambda q: mse(max_pool(q["a"], axis=0), Tensor(np.zeros(6))), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mse_both_sides(self, seed):
        rng = np.random.default_rng(seed)
        p = {"a": t64(rng, 3, 3), "b": t64(rng, 3, 3)}
        check_gradients(lambda q: mse(q["a"], q["b"]), p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat_slice_reshape_transpose(self, seed):
        rng = np.random.default_rng(seed)
        p = {"a": t64(rng, 2, 3), "b": t64(rng, 2, 2)}

        def f(q):
            joined = concat([q["a"], q["b"]], axis=1)  # (2,5)
            piece = slice_(joined, (slice(None), slice(1, 4)))  # (2,3)
            back = transpose(reshape(piece, (3, 2)), (1, 0))
            return mse(back, Tensor(np.zeros((2, 3))))

        check_gradients(f, p)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_cross_attention(self, seed):
        rng = np.random.default_rng(seed)
        d = 8
        params = {k: _to64(v) for k, v in init_attention(rng, d).items()}
        q_tokens = Tensor(rng.standard_normal((3, d)))
        kv_tokens = Tensor(rng.standard_normal((5, d)))
        check_gradients(
            lambda p: mse(
                multi_head_cross_attention(q_tokens, kv_tokens, 4, p), Tensor(np.zeros((3, d)))
            ),
            params,
            tol=1e-4,
        )


def _to64(t):
    return Tensor(t.data.astype(np.float64), requires_grad=True)


class TestAttention:
    def _params(self, rng, d):
        return init_attention(rng, d, dtype=np.float64)

    def test_singleton_kv_collapses(self):
        rng = np.random.default_rng(10)
        d = 8
        p = self._params(rng, d)
        q_tokens = Tensor(rng.standard_normal((6, d)))
        kv = Tensor(rng.standard_normal((1, d)))
        out = multi_head_cross_attention(q_tokens, kv, 4, p).data
        # Softmax over one element is 1, so every query sees the same value token.
        np.testing.assert_allclose(out, np.tile(out[0], (6, 1)), atol=1e-12)
        direct = (kv.data @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
        np.testing.assert_allclose(out[0], direct[0], atol=1e-12)

    def test_kv_permutation_invariance(self):
        rng = np.random.default_rng(11)
        d = 12
        p = self._params(rng, d)
        q_tokens = Tensor(rng.standard_normal((4, d)))
        kv = rng.standard_normal((7, d))
        out1 = multi_head_cross_attention(q_tokens, Tensor(kv), 4, p).data
        out2 = multi_head_cross_attention(q_tokens, Tensor(kv[::-1].copy()), 4, p).data
        np.testing.assert_allclose(out1, out2, atol=1e-9)

    def test_zero_output_projection(self):
        rng = np.random.default_rng(12)
        d = 8
        p = self._params(rng, d)
        p["wo"] = Tensor(np.zeros((d, d)), requires_grad=True)
        p["bo"] = Tensor(np.zeros(d), requires_grad=True)
        out = multi_head_cross_attention(
            Tensor(rng.standard_normal((3, d))), Tensor(rng.standard_normal((5, d))), 4, p
        )
        np.testing.assert_array_equal(out.data, np.zeros((3, d)))

    def test_indivisible_heads_rejected(self):
        rng = np.random.default_rng(13)
        p = self._params(rng, 9)
        with pytest.raises(ValueError, match="divisible"):
            multi_head_cross_attention(
                Tensor(np.zeros((2, 9))), Tensor(np.zeros((2, 9))), 4, p
            )

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(14)
        d = 8
        p = self._params(rng, d)
        qs = rng.standard_normal((3, 5, d))
        kvs = rng.standard_normal((3, 6, d))
        batched = multi_head_cross_attention(Tensor(qs), Tensor(kvs), 2, p).data
        for i in range(3):
            single = multi_head_cross_attention(Tensor(qs[i]), Tensor(kvs[i]), 2, p).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)


class TestAdamW:
    def test_zero_grad_zero_decay_fixed_point(self):
        w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = AdamW({"w": w}, lr=0.1, weight_decay=0.0)
        w.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(w.data, [1.0, -2.0])

    def test_descent_on_square(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW({"w": w}, lr=0.1)
        w.grad = 2 * w.data
        opt.step()
        assert w.data[0] ** 2 < 1.0

    def test_quadratic_reaches_small_gradient(self):
        # Closed-form minimizer (1, -2); gradient decays toward zero there.
        target = np.array([1.0, -2.0])
        curv = np.array([3.0, 1.0])
        w = Tensor(np.array([4.0, 5.0]), requires_grad=True)
        opt = AdamW({"w": w}, lr=0.2, weight_decay=0.0)
        for _ in range(200):
            w.grad = curv * (w.data - target)
            opt.step()
        assert np.linalg.norm(curv * (w.data - target)) < 1e-3

    def test_non_finite_gradient_aborts(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = AdamW({"w": w}, lr=0.1)
        w.grad = np.array([np.nan])
        with pytest.raises(RuntimeError, match="non-finite"):
            opt.step()

    def test_functional_step_matches_class(self):
        rng = np.random.default_rng(15)
        data = rng.standard_normal(4)
        grad = rng.standard_normal(4)
        w = Tensor(data.copy(), requires_grad=True)
        opt = AdamW({"w": w}, lr=0.01, weight_decay=0.05)
        w.grad = grad.copy()
        opt.step()
        manual = data.copy()
        state = {"m": np.zeros(4), "v": np.zeros(4), "t": 0}
        adamw_step(manual, grad, state, lr=0.01, weight_decay=0.05)
        np.testing.assert_allclose(w.data, manual, atol=1e-12)

    def test_state_round_trip(self):
        rng = np.random.default_rng(16)
        w = Tensor(rng.standard_normal(3), requires_grad=True)
        opt = AdamW({"w": w}, lr=0.05)
        for _ in range(3):
            w.grad = rng.standard_normal(3)
            opt.step()
        stash = {k: v.copy() for k, v in opt.state_arrays().items()}
        w2 = Tensor(w.data.copy(), requires_grad=True)
        opt2 = AdamW({"w": w2}, lr=0.05)
        opt2.load_state_arrays(stash)
        g = rng.standard_normal(3)
        w.grad = g.copy()
        w2.grad = g.copy()
        opt.step()
        opt2.step()
        np.testing.assert_array_equal(w.data, w2.data)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(20)
        arrays = {
            "layer.w": rng.standard_normal((3, 4)).astype(np.float32),
            "layer.b": rng.standard_normal(4).astype(np.float64),
        }
        manifest = {"dim": 4, "kind": "test"}
        path = tmp_path / "model.cvck"
        save_checkpoint(path, arrays, manifest)
        loaded, mf = load_checkpoint(path)
        assert mf == manifest
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])
            assert loaded[k].dtype == arrays[k].dtype

    def test_byte_deterministic(self, tmp_path):
        arrays = {"a": np.ones((2, 2), dtype=np.float32), "b": np.zeros(3, dtype=np.float32)}
        p1, p2 = tmp_path / "a.cvck", tmp_path / "b.cvck"
        save_checkpoint(p1, arrays, {"x": 1})
        save_checkpoint(p2, dict(reversed(list(arrays.items()))), {"x": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "model.cvck"
        save_checkpoint(path, {"w": np.arange(6, dtype=np.float32)}, {})
        raw = bytearray(path.read_bytes())
        raw[-6] ^= 0xFF  # flip a payload byte
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "model.cvck"
        save_checkpoint(path, {"w": np.arange(6, dtype=np.float32)}, {})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.cvck"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)


class TestLinearInit:
    def test_linear_shapes_and_bounds(self):
        rng = np.random.default_rng(30)
        w, b = init_linear(rng, 64, 32)
        assert w.shape == (64, 32) and b.shape == (32,)
        bound = (1 / 64) ** 0.5
        assert np.all(np.abs(w.data) <= bound)
        assert np.all(b.data == 0)

    def test_linear_forward_on_3d(self):
        rng = np.random.default_rng(31)
        w, b = init_linear(rng, 5, 7, dtype=np.float64)
        x = rng.standard_normal((2, 3, 5))
        out = linear(Tensor(x), w, b)
        assert out.shape == (2, 3, 7)
        np.testing.assert_allclose(out.data, x @ w.data + b.data, atol=1e-12)
