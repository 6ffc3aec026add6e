import zlib

import numpy as np
import pytest

from conftest import numeric_gradient, relative_error

from binflow.autodiff import (
    AdamOptimizer,
    NonFiniteError,
    OptimizerState,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    clip_by_global_norm,
    clip_by_group_norm,
    get_tape,
    learning_rate_at,
    no_grad,
    parameter,
    tensor,
)
from binflow.autodiff import ops


def _dims(rng, count, low=1, high=8):
    return tuple(int(d) for d in rng.integers(low, high + 1, size=count))


def _pool_mask(rng, shape):
    mask = rng.random(shape) > 0.4
    mask[..., 0] = True
    return mask


# Each case builds (arrays, fn) where fn maps tensors to an output tensor.
def _case(name, rng):
    if name == "add":
        r, c = _dims(rng, 2)
        return [rng.normal(size=(r, c)), rng.normal(size=(c,))], lambda a, b: ops.add(a, b)
    if name == "sub":
        shape = _dims(rng, 2)
        return [rng.normal(size=shape), rng.normal(size=shape)], lambda a, b: ops.sub(a, b)
    if name == "mul":
        shape = _dims(rng, 3)
        return [rng.normal(size=shape), rng.normal(size=())], lambda a, b: ops.mul(a, b)
    if name == "div":
        shape = _dims(rng, 2)
        den = rng.uniform(1.0, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return [rng.normal(size=shape), den], lambda a, b: ops.div(a, b)
    if name == "neg":
        return [rng.normal(size=_dims(rng, 2))], lambda a: ops.neg(a)
    if name == "matmul":
        n, k, m, b = _dims(rng, 4)
        variant = rng.integers(0, 3)
        if variant == 0:
            return [rng.normal(size=(n, k)), rng.normal(size=(k, m))], lambda x, y: ops.matmul(x, y)
        if variant == 1:
            return [rng.normal(size=(b, n, k)), rng.normal(size=(k, m))], lambda x, y: ops.matmul(x, y)
        return [rng.normal(size=(b, n, k)), rng.normal(size=(b, k, m))], lambda x, y: ops.matmul(x, y)
    if name == "transpose":
        return [rng.normal(size=_dims(rng, 3))], lambda x: ops.transpose(x, axes=(2, 0, 1))
    if name == "reshape":
        a, b = _dims(rng, 2)
        return [rng.normal(size=(a, b))], lambda x: ops.reshape(x, (b, a))
    if name == "concat":
        r, c1, c2 = _dims(rng, 3)
        return [rng.normal(size=(r, c1)), rng.normal(size=(r, c2))], lambda x, y: ops.concat([x, y], axis=1)
    if name == "slice":
        r, c = _dims(rng, 2, low=2)
        start = int(rng.integers(0, c - 1))
        return [rng.normal(size=(r, c))], lambda x: ops.slice_axis(x, 1, start, c)
    if name == "expand":
        r, c, s = _dims(rng, 3)
        return [rng.normal(size=(r, c))], lambda x: ops.expand(x, axis=1, size=s)
    if name == "sum":
        return [rng.normal(size=_dims(rng, 3))], lambda x: ops.sum(x, axis=1)
    if name == "mean":
        return [rng.normal(size=_dims(rng, 3))], lambda x: ops.mean(x, axis=-1, keepdims=True)
    if name == "max_pool":
        b, s, d = _dims(rng, 3)
        mask = _pool_mask(rng, (b, s))
        return [rng.normal(size=(b, s, d))], lambda x: ops.max_pool(x, mask=mask)
    if name == "mean_pool":
        b, s, d = _dims(rng, 3)
        mask = _pool_mask(rng, (b, s))
        return [rng.normal(size=(b, s, d))], lambda x: ops.mean_pool(x, mask=mask)
    if name in ("softmax", "log_softmax", "sigmoid", "tanh", "exp", "relu"):
        fn = getattr(ops, name)
        return [rng.normal(size=_dims(rng, 2))], lambda x: fn(x)
    if name == "log":
        return [rng.uniform(0.5, 3.0, size=_dims(rng, 2))], lambda x: ops.log(x)
    if name == "layer_norm":
        r, d = _dims(rng, 2, low=2)
        return (
            [rng.normal(size=(r, d)), rng.normal(size=(d,)), rng.normal(size=(d,))],
            lambda x, g, b: ops.layer_norm(x, g, b),
        )
    if name == "embedding":
        v, d, n = _dims(rng, 3)
        ids = rng.integers(0, v, size=(n,))
        return [rng.normal(size=(v, d))], lambda t: ops.embedding(t, ids)
    if name == "cross_entropy":
        b, s, v = _dims(rng, 3, low=2)
        targets = rng.integers(0, v, size=(b, s))
        weights = (rng.random((b, s)) > 0.3).astype(float)
        return [rng.normal(size=(b, s, v))], lambda x: ops.cross_entropy(x, targets, weights)
    if name == "bce_with_logits":
        shape = _dims(rng, 1)
        targets = rng.integers(0, 2, size=shape).astype(float)
        return [rng.normal(size=shape)], lambda x: ops.bce_with_logits(x, targets)
    if name == "masked_fill":
        r, c = _dims(rng, 2)
        mask = rng.random((c,)) > 0.5
        return [rng.normal(size=(r, c))], lambda x: ops.masked_fill(x, mask, -3.0)
    if name == "dropout":
        shape = _dims(rng, 2)
        keep = (rng.random(shape) > 0.5) * 2.0
        return [rng.normal(size=shape)], lambda x: ops.apply_primitive("dropout", x, keep=keep)
    if name == "inverse":
        n = int(rng.integers(1, 6))
        return [np.eye(n) * 3.0 + rng.normal(scale=0.3, size=(n, n))], lambda a: ops.inverse(a)
    raise KeyError(name)


GRADIENT_CASES = [
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape", "concat", "slice",
    "expand", "sum", "mean", "max_pool", "mean_pool", "softmax", "log_softmax", "sigmoid",
    "tanh", "exp", "log", "relu", "layer_norm", "embedding", "cross_entropy",
    "bce_with_logits", "masked_fill", "dropout", "inverse",
]


class TestPrimitiveValues:
    """Forward values of primitives."""

    def test_sigmoid_zero(self, f64):
        assert ops.sigmoid(tensor([0.0])).data.tolist() == [0.5]

    def test_matmul_row_sums(self, f64):
        out = ops.matmul(tensor(np.ones((2, 3))), tensor(np.ones((3, 1))))
        assert out.shape == (2, 1)
        assert out.data.ravel().tolist() == [3.0, 3.0]

    def test_softmax_uniform(self, f64):
        out = ops.softmax(tensor([1.0, 1.0, 1.0, 1.0]))
        np.testing.assert_allclose(out.data, [0.25] * 4)

    def test_pooling_ignores_masked_positions(self, f64):
        x = tensor([[[1.0, 5.0], [3.0, -1.0], [100.0, 100.0]]])
        mask = np.array([[True, True, False]])
        np.testing.assert_allclose(ops.max_pool(x, mask).data, [[3.0, 5.0]])
        np.testing.assert_allclose(ops.mean_pool(x, mask).data, [[2.0, 2.0]])

    def test_cross_entropy_ignores_zero_weight(self, f64):
        logits = tensor(np.zeros((1, 2, 4)))
        loss = ops.cross_entropy(logits, np.array([[0, 1]]), np.array([[1.0, 0.0]]))
        assert loss.item() == pytest.approx(np.log(4.0))

    def test_non_finite_output_is_flagged(self, f64):
        with pytest.raises(NonFiniteError, match="log"):
            ops.log(tensor([-1.0]))

    def test_unknown_primitive(self):
        with pytest.raises(ValueError, match="Unknown primitive"):
            ops.apply_primitive("conv9d", tensor([1.0]))


class TestShapeRules:
    """Conforming and non-conforming shapes."""

    @pytest.mark.parametrize("seed", range(10))
    def test_elementwise_broadcast_rules(self, f64, seed):
        rng = np.random.default_rng(seed)
        r, c = _dims(rng, 2, low=2)
        a = tensor(rng.normal(size=(r, c)))
        assert ops.add(a, tensor(rng.normal(size=(c,)))).shape == (r, c)
        assert ops.mul(a, 2.0).shape == (r, c)
        with pytest.raises(ShapeError) as info:
            ops.add(a, tensor(rng.normal(size=(c + 1,))))
        assert str((r, c)) in str(info.value) and str((c + 1,)) in str(info.value)
        with pytest.raises(ShapeError):
            ops.add(a, tensor(rng.normal(size=(r, 1))))

    @pytest.mark.parametrize("seed", range(10))
    def test_matmul_rules(self, f64, seed):
        rng = np.random.default_rng(seed)
        n, k, m, b = _dims(rng, 4)
        assert ops.matmul(tensor(np.ones((b, n, k))), tensor(np.ones((k, m)))).shape == (b, n, m)
        with pytest.raises(ShapeError):
            ops.matmul(tensor(np.ones((n, k))), tensor(np.ones((k + 1, m))))
        with pytest.raises(ShapeError):
            ops.matmul(tensor(np.ones((b, n, k))), tensor(np.ones((b + 1, k, m))))

    def test_structural_rules(self, f64):
        x = tensor(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            ops.reshape(x, (4, 2))
        with pytest.raises(ShapeError):
            ops.concat([x, tensor(np.ones((3, 3)))], axis=1)
        with pytest.raises(ShapeError):
            ops.slice_axis(x, 1, 2, 5)
        with pytest.raises(ShapeError):
            ops.layer_norm(x, tensor(np.ones(2)), tensor(np.ones(3)))
        with pytest.raises(ShapeError):
            ops.max_pool(tensor(np.ones((2, 3, 4))), mask=np.ones((2, 4), dtype=bool))
        with pytest.raises(ShapeError):
            ops.inverse(x)
        assert ops.reshape(x, (-1,)).shape == (6,)

    def test_embedding_out_of_range(self, f64):
        with pytest.raises(ValueError, match="out of range"):
            ops.embedding(tensor(np.ones((3, 2))), np.array([0, 3]))


class TestBackward:
    """Reverse-mode sweeps."""

    def test_sum_gives_ones(self, f64):
        x = parameter(np.arange(6.0).reshape(2, 3))
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square(self, f64):
        x = parameter([1.0, 2.0, 3.0])
        backward(ops.sum(ops.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_rejected(self, f64):
        x = parameter([1.0, 2.0])
        with pytest.raises(ShapeError, match="scalar"):
            backward(ops.mul(x, 2.0))

    def test_tape_is_consumed(self, f64):
        x = parameter([1.0, 2.0])
        loss = ops.sum(ops.exp(x))
        assert len(get_tape()) == 2
        backward(loss)
        assert len(get_tape()) == 0

    def test_no_grad_records_nothing(self, f64):
        x = parameter([1.0, 2.0])
        with no_grad():
            y = ops.sum(ops.mul(x, x))
        assert len(get_tape()) == 0
        assert not y.requires_grad

    def test_constants_receive_no_grad(self, f64):
        x = parameter([1.0])
        c = tensor([3.0])
        backward(ops.sum(ops.mul(x, c)))
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [3.0])

    def test_reused_input_accumulates(self, f64):
        x = parameter([2.0])
        y = ops.mul(x, 3.0)
        backward(ops.sum(ops.add(y, y)))
        np.testing.assert_allclose(x.grad, [6.0])

    @pytest.mark.parametrize("name", GRADIENT_CASES)
    def test_primitive_gradients_match_finite_differences(self, f64, name):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(20):
            arrays, fn = _case(name, rng)
            arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
            probe_shape = fn(*[tensor(a) for a in arrays]).shape
            probe = rng.normal(size=probe_shape)

            def scalar(*values):
                with no_grad():
                    out = fn(*[tensor(v) for v in values])
                return float(np.sum(out.data * probe))

            params = [parameter(a.copy()) for a in arrays]
            out = fn(*params)
            backward(ops.sum(ops.mul(out, tensor(probe))))
            for i, p in enumerate(params):
                expected = numeric_gradient(scalar, [a.copy() for a in arrays], i)
                assert relative_error(p.grad, expected) < 1e-4, name

    def test_deep_composition_matches_finite_differences(self, f64, rng):
        w = [rng.normal(scale=0.5, size=(6, 6)) for _ in range(5)]
        x0 = rng.normal(size=(3, 6))

        def build(*ws):
            h = tensor(x0)
            for i, wi in enumerate(ws):
                h = ops.matmul(h, wi)
                h = ops.tanh(h) if i % 2 == 0 else ops.sigmoid(h)
            return ops.sum(ops.mul(h, h))

        def scalar(*values):
            with no_grad():
                return build(*[tensor(v) for v in values]).item()

        params = [parameter(a.copy()) for a in w]
        backward(build(*params))
        for i, p in enumerate(params):
            expected = numeric_gradient(scalar, [a.copy() for a in w], i)
            assert relative_error(p.grad, expected) < 1e-4

    def test_determinism(self, f64):
        def run():
            rng = np.random.default_rng(7)
            x = parameter(rng.normal(size=(4, 5)))
            w = parameter(rng.normal(size=(5, 3)))
            loss = ops.sum(ops.softmax(ops.matmul(x, w)))
            backward(loss)
            return loss.data.copy(), w.grad.copy()

        first, second = run(), run()
        assert first[0].tobytes() == second[0].tobytes()
        assert first[1].tobytes() == second[1].tobytes()


class TestAdam:
    """Optimizer step, clipping and schedule."""

    def test_global_norm_clipping(self):
        grads = {"a": np.array([6.0]), "b": np.array([8.0])}
        clipped, norm = clip_by_global_norm(grads, 5.0)
        assert norm == pytest.approx(10.0)
        np.testing.assert_allclose(clipped["a"], [3.0])
        np.testing.assert_allclose(clipped["b"], [4.0])

    def test_group_norm_clipping(self):
        grads = {"a": np.array([3.0]), "flow/b": np.array([300.0]), "flow/c": np.array([400.0])}
        clipped, norms = clip_by_group_norm(grads, [["flow/b", "flow/c"]], 5.0)
        assert norms == pytest.approx([500.0, 3.0])
        np.testing.assert_allclose(clipped["a"], [3.0])
        np.testing.assert_allclose(clipped["flow/b"], [3.0])
        np.testing.assert_allclose(clipped["flow/c"], [4.0])
        with pytest.raises(ValueError, match="overlap"):
            clip_by_group_norm(grads, [["a"], ["a"]], 5.0)

    def test_grouped_step_keeps_small_group_unscaled(self, f64):
        a, b = parameter([0.0]), parameter([0.0])
        state = OptimizerState()
        adam_step({"a": a, "b": b}, {"a": np.array([1.0]), "b": np.array([1000.0])}, state, lr=0.1, groups=[["b"]])
        np.testing.assert_allclose(state.m["a"], [0.1])
        np.testing.assert_allclose(state.m["b"], [0.5])

    def test_zero_grads_leave_params(self, f64):
        w = parameter([1.0, -2.0])
        state = OptimizerState()
        adam_step({"w": w}, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(w.data, [1.0, -2.0])
        assert state.step == 1
        np.testing.assert_array_equal(state.m["w"], [0.0, 0.0])

    def test_first_step_descends(self, f64):
        w = parameter([1.0])
        backward(ops.sum(ops.mul(w, w)))
        opt = AdamOptimizer({"w": w}, lr=0.1, warmup=0)
        opt.step()
        assert w.data[0] < 1.0
        assert w.data[0] == pytest.approx(0.9, abs=1e-6)
        assert w.grad is None

    def test_missing_grad_rejected(self, f64):
        with pytest.raises(ValueError, match="Missing gradients"):
            adam_step({"w": parameter([1.0])}, {}, OptimizerState(), lr=0.1)

    def test_inverse_sqrt_schedule(self):
        assert learning_rate_at(10, 1e-3, 100) == 1e-3
        assert learning_rate_at(100, 1e-3, 100) == 1e-3
        assert learning_rate_at(400, 1e-3, 100) == pytest.approx(5e-4)


class TestTensor:
    def test_rejects_empty_dimension(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((0, 3)))

    def test_grad_shape_matches(self, f64):
        x = parameter(np.ones((2, 2)))
        backward(ops.mean(x))
        assert x.grad.shape == x.shape
