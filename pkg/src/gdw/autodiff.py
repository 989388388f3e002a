"""Dense float64 tensors with tape-based reverse mode and a dual-number forward mode.

Only the handful of primitives needed by the two MLPs are provided: ``matmul``,
``bias_add``, ``relu``, ``sigmoid``, elementwise ``add``/``mul``/``scale``,
``sum`` and a fused softmax cross-entropy that hands back ``p - y`` directly.

Reverse mode records every op whose inputs require gradients onto the active
:class:`Tape`. Forward mode runs the same layer code on :class:`Dual` values,
which carry one tangent per primal array.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "ContractError",
    "EmptyGradientError",
    "Tensor",
    "Tape",
    "Dual",
    "matmul",
    "bias_add",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "tsum",
    "softmax",
    "softmax_xent",
    "backward",
    "vjp",
    "forward_mlp",
    "jvp_logits",
]


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf; ``op`` names the culprit."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by {op}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ContractError(ValueError):
    pass


class EmptyGradientError(RuntimeError):
    pass


_ids = itertools.count()
_active_tapes: list["Tape"] = []


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op)
    return arr


class Tensor:
    """A float64 array with an optional gradient slot.

    ``requires_grad`` marks leaves (parameters) whose gradients ``backward``
    fills. Intermediate results inherit the flag from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, id={self.node_id}, requires_grad={self.requires_grad})"

    # The layer code is written against these methods so it runs on Dual too.
    def matmul(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def bias_add(self, b: "Tensor") -> "Tensor":
        return bias_add(self, b)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)


@dataclass
class _Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: tuple[np.ndarray, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    forward: Callable[..., np.ndarray]


@dataclass
class Tape:
    """Ordered record of primitive ops.

    Use as a context manager; ops created inside the ``with`` block whose
    inputs require gradients are appended in execution order, so inputs
    always precede the ops that consume them.
    """

    ops: list[_Op] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def replay(self) -> bool:
        """Recompute every op from its saved inputs; True if all outputs match bit-for-bit."""
        for op in self.ops:
            out = op.forward(*op.saved)
            if not np.array_equal(out, op.output.data):
                return False
        return True

    def backward(self, loss: Tensor) -> list[Tensor]:
        return backward(loss, self)

    def vjp(self, output: Tensor, seed: np.ndarray) -> list[Tensor]:
        return vjp(output, seed, self)


def _record(name, inputs, out_data, vjp_fn, forward_fn) -> Tensor:
    _check_finite(name, out_data)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires and _active_tapes:
        op = _Op(name, tuple(inputs), out, tuple(t.data for t in inputs), vjp_fn, forward_fn)
        _active_tapes[-1].ops.append(op)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _matmul_fwd(a, b):
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g), _matmul_fwd)


def _bias_add_fwd(x, b):
    return x + b


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    if b.data.ndim != 1 or x.data.ndim != 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias of shape {b.shape} does not fit {x.shape}")
    return _record("bias_add", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)), _bias_add_fwd)


def _relu_fwd(x):
    return np.maximum(x, 0.0)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), _relu_fwd(x.data), lambda g: (g * mask,), _relu_fwd)


def _sigmoid_fwd(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_fwd(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),), _sigmoid_fwd)


def _add_fwd(a, b):
    return a + b


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes {a.shape} and {b.shape} differ")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g), _add_fwd)


def _mul_fwd(a, b):
    return a * b


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad), _mul_fwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,), lambda xd: xd * c)


def _sum_fwd(x):
    return np.asarray(x.sum())


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), _sum_fwd(x.data), lambda g: (np.broadcast_to(g, shape).copy(),), _sum_fwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_onehot(onehot: np.ndarray, shape) -> None:
    if onehot.shape != shape:
        raise DimensionError(f"one-hot shape {onehot.shape} != logits shape {shape}")
    ok = np.all((onehot == 0.0) | (onehot == 1.0)) and np.all(onehot.sum(axis=1) == 1.0)
    if not ok:
        raise ContractError("label rows must be one-hot")


def _xent_fwd(logits, onehot):
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    return logsum - (z * onehot).sum(axis=1)


def softmax_xent(logits: Tensor, onehot) -> tuple[Tensor, np.ndarray]:
    """Per-instance cross-entropy and its logit gradient ``d1 = p - y``.

    ``d1`` is returned unaveraged (one row per instance); any ``1/n`` belongs
    to the caller. The backward of the loss vector scales each ``d1`` row by
    the incoming per-instance gradient.
    """
    onehot = np.asarray(onehot, dtype=np.float64)
    _check_onehot(onehot, logits.shape)
    p = softmax(logits.data)
    d1 = p - onehot
    loss = _xent_fwd(logits.data, onehot)
    _check_finite("softmax_xent", d1)
    y = Tensor(onehot)
    out = _record("softmax_xent", (logits, y), loss, lambda g: (g[:, None] * d1, None), _xent_fwd)
    return out, d1


def vjp(output: Tensor, seed: np.ndarray, tape: Tape) -> list[Tensor]:
    """Backpropagate ``seed`` from ``output`` through ``tape``.

    Accumulates into the ``grad`` slot of every leaf reached and returns
    those leaves in first-seen order.
    """
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise DimensionError(f"seed shape {seed.shape} != output shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.node_id: seed}
    leaves: dict[int, Tensor] = {}
    produced = {op.output.node_id for op in tape.ops}
    if output.node_id not in produced:
        raise EmptyGradientError("output was not recorded on this tape")
    for op in reversed(tape.ops):
        g = grads.pop(op.output.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            _check_finite(f"{op.name}.backward", gi)
            if inp.node_id in produced:
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
            else:
                leaves.setdefault(inp.node_id, inp)
                inp.accumulate(np.asarray(gi))
    if not leaves:
        raise EmptyGradientError("no parameter is reachable from the output")
    return list(leaves.values())


def backward(loss: Tensor, tape: Tape) -> list[Tensor]:
    if loss.data.ndim != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    return vjp(loss, np.ones(()), tape)


class Dual:
    """Array-valued dual number: primal plus one directional tangent."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent=None):
        self.primal = np.asarray(primal, dtype=np.float64)
        if tangent is None:
            self.tangent = np.zeros_like(self.primal)
        else:
            self.tangent = np.asarray(tangent, dtype=np.float64)
            if self.tangent.shape != self.primal.shape:
                raise DimensionError(f"tangent shape {self.tangent.shape} != primal shape {self.primal.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.primal.shape

    def __add__(self, other: "Dual") -> "Dual":
        return Dual(self.primal + other.primal, self.tangent + other.tangent)

    def __mul__(self, other: "Dual") -> "Dual":
        return Dual(self.primal * other.primal, self.primal * other.tangent + self.tangent * other.primal)

    def scale(self, c: float) -> "Dual":
        return Dual(self.primal * c, self.tangent * c)

    def matmul(self, other: "Dual") -> "Dual":
        if self.primal.ndim != 2 or other.primal.ndim != 2 or self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul shapes {self.shape} and {other.shape} do not chain")
        return Dual(self.primal @ other.primal, self.tangent @ other.primal + self.primal @ other.tangent)

    def bias_add(self, b: "Dual") -> "Dual":
        if b.primal.ndim != 1 or self.shape[1] != b.shape[0]:
            raise DimensionError(f"bias of shape {b.shape} does not fit {self.shape}")
        return Dual(self.primal + b.primal, self.tangent + b.tangent)

    def relu(self) -> "Dual":
        mask = self.primal > 0
        return Dual(np.where(mask, self.primal, 0.0), np.where(mask, self.tangent, 0.0))

    def sigmoid(self) -> "Dual":
        s = _sigmoid_fwd(self.primal)
        return Dual(s, self.tangent * s * (1.0 - s))


def forward_mlp(weights: Sequence, biases: Sequence, x, final_act: str | None = None):
    """Run an MLP with relu between layers.

    Works on :class:`Tensor` (recorded when a tape is active) and on
    :class:`Dual` (forward-mode). ``final_act`` may be ``"sigmoid"``.
    """
    if len(weights) != len(biases) or not weights:
        raise DimensionError("need one bias per weight matrix and at least one layer")
    if len(x.shape) != 2 or x.shape[1] != weights[0].shape[0]:
        raise DimensionError(f"input shape {x.shape} does not match first layer {weights[0].shape}")
    h = x
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        h = h.matmul(w).bias_add(b)
        if k < last:
            h = h.relu()
    if final_act == "sigmoid":
        h = h.sigmoid()
    elif final_act is not None:
        raise ValueError(f"unknown final activation {final_act!r}")
    if isinstance(h, Tensor):
        _check_finite("forward_mlp", h.data)
    return h


def jvp_logits(weights: Sequence, biases: Sequence, dweights: Sequence, dbiases: Sequence, x) -> np.ndarray:
    """Directional derivative of every logit along the parameter direction.

    ``out[i, j] = <direction, d logit_ij / d params>``, computed in one dual pass.
    """
    if len(dweights) != len(weights) or len(dbiases) != len(biases):
        raise DimensionError("direction must have one entry per parameter tensor")
    dw = [Dual(_data(w), dv) for w, dv in zip(weights, dweights)]
    db = [Dual(_data(b), dv) for b, dv in zip(biases, dbiases)]
    out = forward_mlp(dw, db, Dual(_data(x)))
    return _check_finite("jvp_logits", out.tangent)


def _data(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
