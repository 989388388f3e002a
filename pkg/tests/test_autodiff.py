import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdw.autodiff import (ContractError, DimensionError, Dual, EmptyGradientError, NonFiniteError, Tape,
                          Tensor, add, backward, bias_add, forward_mlp, jvp_logits, matmul, mul, relu,
                          scale, sigmoid, softmax, softmax_xent, tsum)
from gdw.models import MLPParams, classifier_logits, init_classifier


def _ref_mlp(ws, bs, x):
    # straight-line oracle with explicit loops over rows
    h = np.array(x, dtype=np.float64)
    for k, (w, b) in enumerate(zip(ws, bs)):
        out = np.zeros((h.shape[0], w.shape[1]))
        for i in range(h.shape[0]):
            for j in range(w.shape[1]):
                out[i, j] = sum(h[i, r] * w[r, j] for r in range(w.shape[0])) + b[j]
        h = np.maximum(out, 0.0) if k < len(ws) - 1 else out
    return h


def _xent(z, targets):
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(targets)), targets]


class TestForwardMLP:
    def test_zero_network(self):
        ws = [Tensor(np.zeros((4, 5))), Tensor(np.zeros((5, 3)))]
        bs = [Tensor(np.zeros(5)), Tensor(np.zeros(3))]
        out = forward_mlp(ws, bs, Tensor(np.random.default_rng(0).standard_normal((6, 4))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_identity_layer(self):
        out = forward_mlp([Tensor(np.eye(3))], [Tensor(np.zeros(3))], Tensor(np.eye(3)[:1]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0, 0.0]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(42)
        params = init_classifier(4, [6], 3, rng)
        x = rng.standard_normal((5, 4))
        ref = _ref_mlp([w.data for w in params.weights], [b.data for b in params.biases], x)
        np.testing.assert_allclose(classifier_logits(params, x).data, ref, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            forward_mlp([Tensor(np.eye(3))], [Tensor(np.zeros(3))], Tensor(np.ones((2, 4))))
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_non_finite_names_op(self):
        with pytest.raises(NonFiniteError, match="matmul"):
            matmul(Tensor([[np.inf]]), Tensor([[1.0]]))


class TestSoftmaxXent:
    def test_uniform_logits(self):
        onehot = np.eye(4)[[2]]
        loss, d1 = softmax_xent(Tensor(np.zeros((1, 4))), onehot)
        assert loss.data[0] == pytest.approx(math.log(4), abs=1e-15)
        np.testing.assert_allclose(d1, [[0.25, 0.25, -0.75, 0.25]], atol=1e-15)

    def test_perfect_prediction(self):
        logits = np.array([[60.0, 0.0, 0.0]])
        loss, d1 = softmax_xent(Tensor(logits), np.eye(3)[[0]])
        assert loss.data[0] < 1e-20
        np.testing.assert_allclose(d1, 0.0, atol=1e-20)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((200, 5)) * 2
        t = rng.integers(0, 5, 200)
        _, d1 = softmax_xent(Tensor(z), np.eye(5)[t])
        h = 1e-5
        fd = np.zeros_like(z)
        for j in range(5):
            e = np.zeros(5)
            e[j] = h
            fd[:, j] = (_xent(z + e, t) - _xent(z - e, t)) / (2 * h)
        assert np.abs(d1 - fd).max() <= 1e-8

    def test_rejects_non_onehot(self):
        with pytest.raises(ContractError):
            softmax_xent(Tensor(np.zeros((2, 3))), np.array([[1.0, 0, 0], [0.5, 0.5, 0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6), st.integers(2, 8))
    def test_rows_sum_to_zero(self, seed, c):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((7, c)) * 10
        loss, d1 = softmax_xent(Tensor(z), np.eye(c)[rng.integers(0, c, 7)])
        np.testing.assert_allclose(d1.sum(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-12)
        assert np.all(loss.data >= 0)


class TestBackward:
    def test_sum_of_parameters(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        tape = Tape()
        with tape:
            loss = tsum(a)
        backward(loss, tape)
        np.testing.assert_array_equal(a.grad, 1.0)

    def test_zero_times_anything(self):
        rng = np.random.default_rng(1)
        params = init_classifier(3, [4], 2, rng)
        tape = Tape()
        with tape:
            loss = scale(tsum(classifier_logits(params, rng.standard_normal((5, 3)))), 0.0)
        tape.backward(loss)
        for t in params.tensors:
            np.testing.assert_array_equal(t.grad, 0.0)

    def test_accumulates_on_second_call(self):
        a = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        with tape:
            loss = tsum(mul(a, Tensor([1.0, 2.0, 3.0])))
        tape.backward(loss)
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [2.0, 4.0, 6.0])

    def test_detached_loss(self):
        tape = Tape()
        loss = tsum(Tensor(np.ones(3)))
        with pytest.raises(EmptyGradientError):
            backward(loss, tape)

    def test_needs_scalar(self):
        a = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        with tape:
            out = scale(a, 2.0)
        with pytest.raises(DimensionError):
            backward(out, tape)

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        params = init_classifier(5, [7], 3, rng)
        x = rng.standard_normal((8, 5))
        t = rng.integers(0, 3, 8)

        def f():
            return _xent(classifier_logits(params, x).data, t).mean()

        tape = Tape()
        with tape:
            losses, _ = softmax_xent(classifier_logits(params, x), np.eye(3)[t])
            loss = scale(tsum(losses), 1 / 8)
        tape.backward(loss)
        h = 1e-5
        for p in params.tensors:
            fd = np.zeros_like(p.data)
            for k in np.ndindex(p.data.shape):
                old = p.data[k]
                p.data[k] = old + h
                up = f()
                p.data[k] = old - h
                down = f()
                p.data[k] = old
                fd[k] = (up - down) / (2 * h)
            rel = np.abs(p.grad - fd) / np.maximum(np.maximum(np.abs(p.grad), np.abs(fd)), 1e-6)
            assert rel.max() <= 1e-6

    def test_elementwise_ops(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.standard_normal(5), requires_grad=True)
        b = Tensor(rng.standard_normal(5), requires_grad=True)
        tape = Tape()
        with tape:
            loss = tsum(add(mul(a, b), sigmoid(a)))
        tape.backward(loss)
        s = 1 / (1 + np.exp(-a.data))
        np.testing.assert_allclose(a.grad, b.data + s * (1 - s), rtol=1e-14)
        np.testing.assert_allclose(b.grad, a.data, rtol=0)

    def test_relu_and_bias(self):
        x = Tensor(np.array([[-1.0, 2.0]]), requires_grad=True)
        b = Tensor(np.array([0.5, 0.5]), requires_grad=True)
        tape = Tape()
        with tape:
            loss = tsum(relu(bias_add(x, b)))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0]])
        np.testing.assert_array_equal(b.grad, [0.0, 1.0])

    def test_sigmoid_extremes_are_finite(self):
        out = sigmoid(Tensor(np.array([-800.0, 0.0, 800.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])


class TestTape:
    def test_topological_order(self):
        rng = np.random.default_rng(5)
        params = init_classifier(3, [4, 4], 2, rng)
        tape = Tape()
        with tape:
            softmax_xent(classifier_logits(params, rng.standard_normal((3, 3))), np.eye(2)[[0, 1, 0]])
        seen = {t.node_id for t in params.tensors}
        for op in tape.ops:
            for inp in op.inputs:
                if inp.requires_grad:
                    assert inp.node_id in seen
            seen.add(op.output.node_id)

    def test_replay_bit_for_bit(self):
        rng = np.random.default_rng(6)
        params = init_classifier(3, [8], 4, rng)
        tape = Tape()
        with tape:
            softmax_xent(classifier_logits(params, rng.standard_normal((10, 3))), np.eye(4)[rng.integers(0, 4, 10)])
        assert len(tape) > 0
        assert tape.replay()
        tape.ops[0].output.data[0, 0] += 1e-300 + 1e-9
        assert not tape.replay()

    def test_no_recording_without_grad(self):
        tape = Tape()
        with tape:
            matmul(Tensor(np.eye(2)), Tensor(np.eye(2)))
        assert len(tape) == 0


class TestForwardMode:
    def test_constant_has_zero_tangent(self):
        np.testing.assert_array_equal(Dual(np.ones(3)).tangent, 0.0)

    def test_zero_direction(self):
        rng = np.random.default_rng(7)
        p = init_classifier(3, [5], 2, rng)
        zeros = [np.zeros_like(a) for a in p.arrays()]
        u = jvp_logits(p.weights, p.biases, zeros[0::2], zeros[1::2], rng.standard_normal((4, 3)))
        np.testing.assert_array_equal(u, 0.0)

    def test_linear_model(self):
        rng = np.random.default_rng(8)
        w, b, x = rng.standard_normal((3, 2)), rng.standard_normal(2), rng.standard_normal((4, 3))
        dw = rng.standard_normal((3, 2))
        u = jvp_logits([w], [b], [dw], [np.zeros(2)], x)
        np.testing.assert_array_equal(u, x @ dw)

    def test_matches_symmetric_difference(self):
        rng = np.random.default_rng(9)
        p = init_classifier(5, [7], 3, rng)
        x = rng.standard_normal((8, 5))
        d = [rng.standard_normal(a.shape) for a in p.arrays()]
        u = jvp_logits(p.weights, p.biases, d[0::2], d[1::2], x)
        eps = 1e-5
        up = classifier_logits(MLPParams.from_arrays([a + eps * v for a, v in zip(p.arrays(), d)]), x).data
        dn = classifier_logits(MLPParams.from_arrays([a - eps * v for a, v in zip(p.arrays(), d)]), x).data
        fd = (up - dn) / (2 * eps)
        rel = np.abs(u - fd) / np.maximum(np.maximum(np.abs(u), np.abs(fd)), 1e-6)
        assert rel.max() <= 1e-6

    def test_linearity(self):
        rng = np.random.default_rng(10)
        p = init_classifier(3, [6], 3, rng)
        x = rng.standard_normal((5, 3))
        d1 = [rng.standard_normal(a.shape) for a in p.arrays()]
        d2 = [rng.standard_normal(a.shape) for a in p.arrays()]
        comb = [2.0 * a - 3.0 * b for a, b in zip(d1, d2)]

        def j(d):
            return jvp_logits(p.weights, p.biases, d[0::2], d[1::2], x)

        np.testing.assert_allclose(j(comb), 2 * j(d1) - 3 * j(d2), atol=1e-12)

    def test_direction_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Dual(np.ones(3), np.ones(2))
        with pytest.raises(DimensionError):
            jvp_logits([np.eye(2)], [np.zeros(2)], [], [np.zeros(2)], np.ones((1, 2)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_jvp_vjp_duality(self, seed):
        rng = np.random.default_rng(seed)
        p = init_classifier(4, [6], 3, rng)
        x = rng.standard_normal((5, 4))
        v = [rng.standard_normal(a.shape) for a in p.arrays()]
        u = rng.standard_normal((5, 3))
        lhs = float((u * jvp_logits(p.weights, p.biases, v[0::2], v[1::2], x)).sum())
        tape = Tape()
        with tape:
            logits = classifier_logits(p, x)
        tape.vjp(logits, u)
        rhs = sum(float((a * g).sum()) for a, g in zip(v, p.grads()))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))
