"""Finite-difference checks of the reverse, forward and hypergradient paths."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, jvp_logits, scale, softmax, softmax_xent, tsum
from .classweights import ClassWeightMatrix, clone_weights
from .engine import forward_batch, meta_gradient, omega_gradients, virtual_update
from .models import MLPParams, classifier_logits, init_classifier


def _rel_err(a, b, floor: float = 0.0) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _mean_xent(params: MLPParams, x, onehot) -> float:
    logits = classifier_logits(params, x).data
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(logp * onehot).sum(axis=1).mean())


def check_backward(seed: int = 0, dims=(5, 7, 3), batch: int = 8, h: float = 1e-5) -> float:
    """Max relative error of tape gradients against central differences."""
    rng = np.random.default_rng(seed)
    params = init_classifier(dims[0], dims[1:-1], dims[-1], rng)
    x = rng.standard_normal((batch, dims[0]))
    onehot = np.eye(dims[-1])[rng.integers(0, dims[-1], batch)]
    tape = Tape()
    with tape:
        losses, _ = softmax_xent(classifier_logits(params, x), onehot)
        loss = scale(tsum(losses), 1.0 / batch)
    tape.backward(loss)
    worst = 0.0
    for t in params.tensors:
        fd = np.zeros_like(t.data)
        for k in np.ndindex(t.data.shape):
            old = t.data[k]
            t.data[k] = old + h
            up = _mean_xent(params, x, onehot)
            t.data[k] = old - h
            down = _mean_xent(params, x, onehot)
            t.data[k] = old
            fd[k] = (up - down) / (2 * h)
        worst = max(worst, float(_rel_err(t.grad, fd, 1e-6).max()))
    return worst


def check_jvp(seed: int = 0, dims=(5, 7, 3), batch: int = 8, eps: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    params = init_classifier(dims[0], dims[1:-1], dims[-1], rng)
    x = rng.standard_normal((batch, dims[0]))
    direction = [rng.standard_normal(a.shape) for a in params.arrays()]
    u = jvp_logits(params.weights, params.biases, direction[0::2], direction[1::2], x)
    plus = MLPParams.from_arrays([a + eps * d for a, d in zip(params.arrays(), direction)])
    minus = MLPParams.from_arrays([a - eps * d for a, d in zip(params.arrays(), direction)])
    fd = (classifier_logits(plus, x).data - classifier_logits(minus, x).data) / (2 * eps)
    return float(_rel_err(u, fd, 1e-6).max())


def check_softmax_xent(seed: int = 0, cases: int = 1000, classes: int = 5, h: float = 1e-5) -> float:
    """Max abs error of the fused ``p - y`` against differences of the loss."""
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((cases, classes)) * 3
    targets = rng.integers(0, classes, cases)

    def loss(z):
        return -np.log(softmax(z)[np.arange(cases), targets])

    _, d1 = softmax_xent(Tensor(logits), np.eye(classes)[targets])
    fd = np.zeros_like(logits)
    for j in range(classes):
        e = np.zeros(classes)
        e[j] = h
        fd[:, j] = (loss(logits + e) - loss(logits - e)) / (2 * h)
    return float(np.abs(d1 - fd).max())


def hypergradient_case(seed: int = 0, dims=(2, 16, 3), n: int = 4, m: int = 4, lr: float = 0.1):
    """Small random problem: returns theta, train batch, meta batch and stage-one weights."""
    rng = np.random.default_rng(seed)
    theta = init_classifier(dims[0], dims[1:-1], dims[-1], rng)
    x = rng.standard_normal((n, dims[0]))
    y = rng.integers(0, dims[-1], n)
    xv = rng.standard_normal((m, dims[0]))
    yv = rng.integers(0, dims[-1], m)
    w = rng.uniform(0.2, 1.0, n)
    return theta, (x, y), (xv, yv), clone_weights(w, y, dims[-1]), lr


def meta_loss_at(theta: MLPParams, x, y, omega, xv, yv, lr: float, num_classes: int) -> float:
    """Reverse-mode only: virtual step with ``omega`` then mean meta loss."""
    batch = forward_batch(theta, x, y, num_classes)
    theta_hat = virtual_update(theta, batch, omega, lr)
    return _mean_xent(theta_hat, xv, np.eye(num_classes)[yv])


def check_hypergradient(seed: int = 0, h: float = 1e-4) -> float:
    theta, (x, y), (xv, yv), omega, lr = hypergradient_case(seed)
    c = theta.dims[-1]
    batch = forward_batch(theta, x, y, c)
    theta_hat = virtual_update(theta, batch, omega, lr)
    _, v = meta_gradient(theta_hat, xv, yv, c)
    g = omega_gradients(theta, batch, v, lr)
    fd = np.zeros_like(g)
    for i, j in np.ndindex(g.shape):
        up = ClassWeightMatrix(omega.omega.copy(), omega.targets)
        down = ClassWeightMatrix(omega.omega.copy(), omega.targets)
        up.omega[i, j] += h
        down.omega[i, j] -= h
        fd[i, j] = (meta_loss_at(theta, x, y, up, xv, yv, lr, c)
                    - meta_loss_at(theta, x, y, down, xv, yv, lr, c)) / (2 * h)
    return float(_rel_err(g, fd).max())


def run_all(seed: int = 0) -> dict[str, tuple[float, float]]:
    """``name -> (error, tolerance)`` for every check."""
    return {
        "softmax_xent_abs": (check_softmax_xent(seed), 1e-8),
        "backward_rel": (check_backward(seed), 1e-6),
        "jvp_rel": (check_jvp(seed), 1e-6),
        "hypergradient_rel": (check_hypergradient(seed), 1e-4),
    }
