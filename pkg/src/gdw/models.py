"""The classifier MLP and the loss-to-weight network, plus parameter checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractError, DimensionError, Tensor, forward_mlp

MAGIC = b"GDWTNSR1"
FORMAT_VERSION = 1


@dataclass
class MLPParams:
    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise DimensionError("one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.data.ndim != 2 or b.data.ndim != 1 or w.shape[1] != b.shape[0]:
                raise DimensionError(f"layer {k}: weight {w.shape} and bias {b.shape} inconsistent")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {k} input {w.shape[0]} != previous output {self.weights[k - 1].shape[1]}")

    @property
    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors]

    def grads(self) -> list[np.ndarray]:
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors]

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.zero_grad()

    def named_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{k}.weight"] = w.data
            out[f"{prefix}.{k}.bias"] = b.data
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "MLPParams":
        arrays = list(arrays)
        if len(arrays) % 2:
            raise DimensionError("expected alternating weight/bias arrays")
        ws = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays[0::2]]
        bs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays[1::2]]
        return cls(ws, bs)

    def copy(self) -> "MLPParams":
        return MLPParams.from_arrays([a.copy() for a in self.arrays()])


def init_mlp(dims: Sequence[int], rng: np.random.Generator, zero_final: bool = False) -> MLPParams:
    """He (fan-in) Gaussian init for weights, zero biases."""
    if len(dims) < 2:
        raise DimensionError("an MLP needs input and output dims")
    ws, bs = [], []
    for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if zero_final and k == len(dims) - 2:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        ws.append(Tensor(w, requires_grad=True))
        bs.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return MLPParams(ws, bs)


def init_classifier(din: int, hidden: Sequence[int], num_classes: int, rng: np.random.Generator) -> MLPParams:
    return init_mlp([din, *hidden, num_classes], rng)


def init_weighting_net(rng: np.random.Generator, hidden: int = 100, zero_final: bool = False) -> MLPParams:
    return init_mlp([1, hidden, 1], rng, zero_final=zero_final)


def classifier_logits(params: MLPParams, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return forward_mlp(params.weights, params.biases, x)


def weighting_net(params: MLPParams, losses, standardize: bool = False) -> Tensor:
    """Map per-instance losses to weights in (0, 1); returns shape ``(n, 1)``."""
    raw = losses.data if isinstance(losses, Tensor) else np.asarray(losses, dtype=np.float64)
    raw = raw.reshape(-1)
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise ContractError("weighting net inputs must be finite, non-negative losses")
    inp = raw
    if standardize and raw.size > 1:
        std = raw.std()
        inp = (raw - raw.mean()) / (std if std > 0 else 1.0)
    return forward_mlp(params.weights, params.biases, Tensor(inp[:, None]), final_act="sigmoid")


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays in the versioned binary layout (see docs/checkpoint_format.md)."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(blob)) + blob)
    Path(path).write_bytes(b"".join(parts))


class CheckpointError(ValueError):
    pass


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}: need {nbytes}, have {len(buf) - pos}")
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not a parameter checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = take(klen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (mlen,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(mlen).decode("utf-8"))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after checkpoint body")
    return arrays, meta


def save_params(path, params: MLPParams, prefix: str = "mlp") -> None:
    save_arrays(path, params.named_arrays(prefix), {"prefix": prefix, "dims": params.dims})


def load_params(path) -> MLPParams:
    arrays, meta = load_arrays(path)
    return MLPParams.from_arrays(list(arrays.values()))
