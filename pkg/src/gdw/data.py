"""Synthetic datasets, label corruption, long-tail subsampling and IDX files.

Every dataset keeps the uncorrupted labels next to the observed ones. Only
the diagnostics look at ``clean_labels``; training sees ``labels``.
"""

from __future__ import annotations

import gzip
import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    clean_labels: np.ndarray
    num_classes: int
    ids: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.features.shape[0]
        for name in ("labels", "clean_labels", "ids"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per instance")
        for lab in (self.labels, self.clean_labels):
            if n and (lab.min() < 0 or lab.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def clean_class_counts(self) -> np.ndarray:
        return np.bincount(self.clean_labels, minlength=self.num_classes)

    @property
    def noisy_mask(self) -> np.ndarray:
        return self.labels != self.clean_labels

    @property
    def noise_fraction(self) -> float:
        return float(self.noisy_mask.mean()) if len(self) else 0.0

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       clean_labels=self.clean_labels[idx], ids=self.ids[idx], info=dict(self.info))

    def onehot(self, idx=None) -> np.ndarray:
        lab = self.labels if idx is None else self.labels[idx]
        out = np.zeros((len(lab), self.num_classes))
        out[np.arange(len(lab)), lab] = 1.0
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features.astype("<f8"), self.labels.astype("<i8"),
                    self.clean_labels.astype("<i8"), self.ids.astype("<i8")):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "size": len(self),
            "num_classes": self.num_classes,
            "class_counts": self.class_counts.tolist(),
            "clean_class_counts": self.clean_class_counts.tolist(),
            "noise_fraction": self.noise_fraction,
            "fingerprint": self.fingerprint(),
            **self.info,
        }


def simplex_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Vertices of a regular simplex with pairwise distance ``separation``.

    The simplex lives in the first ``num_classes - 1`` coordinates; the
    remaining coordinates are zero.
    """
    if num_classes < 2 or dim < num_classes - 1:
        raise ValueError("need at least 2 classes and dim >= num_classes - 1")
    centered = np.eye(num_classes) - 1.0 / num_classes
    # orthonormal basis of the centered span, via SVD so the sign is deterministic
    u, s, vt = np.linalg.svd(centered)
    coords = centered @ vt[: num_classes - 1].T
    coords *= separation / math.sqrt(2.0)
    out = np.zeros((num_classes, dim))
    out[:, : num_classes - 1] = coords
    return out


def gen_gaussian_mixture(num_classes: int, per_class: int, dim: int, separation: float,
                         seed: int, std: float = 1.0) -> LabeledDataset:
    """Balanced isotropic Gaussian classes centred on a scaled simplex."""
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    if per_class < 0 or std <= 0:
        raise ValueError("per_class must be >= 0 and std > 0")
    rng = np.random.default_rng(seed)
    means = simplex_means(num_classes, dim, separation)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = means[labels] + std * rng.standard_normal((len(labels), dim))
    return LabeledDataset(x, labels.copy(), labels.copy(), num_classes, np.arange(len(labels)),
                          {"generator": "gaussian_mixture", "separation": separation, "dim": dim})


def inject_uniform_noise(ds: LabeledDataset, p: float, seed: int) -> LabeledDataset:
    """With probability ``p`` each label moves to one of the other classes, uniformly."""
    if not 0 <= p < 1:
        raise ValueError("noise ratio must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    labels = ds.labels.copy()
    hit = rng.random(len(ds)) < p
    offsets = rng.integers(1, ds.num_classes, size=int(hit.sum()))
    labels[hit] = (labels[hit] + offsets) % ds.num_classes
    info = dict(ds.info)
    info.setdefault("corruptions", [])
    info["corruptions"] = info["corruptions"] + [{"kind": "uniform", "p": p, "seed": seed,
                                                  "realized": float(hit.mean()) if len(ds) else 0.0}]
    return replace(ds, labels=labels, info=info)


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def inject_flip_noise(ds: LabeledDataset, p: float, seed: int) -> LabeledDataset:
    """Each class ``j`` flips to one fixed other class ``sigma(j)`` with probability ``p``.

    ``sigma`` is a random derangement drawn once per call and stored in the
    dataset info.
    """
    if not 0 <= p < 1:
        raise ValueError("noise ratio must lie in [0, 1)")
    if ds.num_classes < 2:
        raise ValueError("flip noise needs at least two classes")
    rng = np.random.default_rng(seed)
    sigma = random_derangement(ds.num_classes, rng)
    labels = ds.labels.copy()
    hit = rng.random(len(ds)) < p
    labels[hit] = sigma[labels[hit]]
    info = dict(ds.info)
    info["corruptions"] = info.get("corruptions", []) + [{
        "kind": "flip", "p": p, "seed": seed, "mapping": sigma.tolist(),
        "realized": float(hit.mean()) if len(ds) else 0.0}]
    return replace(ds, labels=labels, info=info)


def longtail_counts(base: int, mu: float, num_classes: int) -> list[int]:
    if not 0 < mu <= 1:
        raise ValueError("imbalance factor must lie in (0, 1]")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    return [int(math.floor(base * mu ** (i / (num_classes - 1)) + 0.5)) for i in range(num_classes)]


def make_longtail(ds: LabeledDataset, mu: float, seed: int = 0) -> LabeledDataset:
    """Subsample class ``i`` down to ``round(n_i * mu**(i / (C - 1)))`` instances.

    Class membership follows the clean labels, so the imbalance is the same
    whether or not label noise was applied first.
    """
    counts = ds.clean_class_counts
    if len(set(counts.tolist())) != 1:
        raise ValueError(f"long-tail subsampling expects balanced classes, got {counts.tolist()}")
    keep_counts = longtail_counts(int(counts[0]), mu, ds.num_classes)
    if min(keep_counts) < 1:
        raise ValueError(f"imbalance factor {mu} empties a class: {keep_counts}")
    rng = np.random.default_rng(seed)
    keep = []
    for c, k in enumerate(keep_counts):
        members = np.flatnonzero(ds.clean_labels == c)
        keep.append(np.sort(rng.choice(members, size=k, replace=False)))
    out = ds.subset(np.concatenate(keep))
    out.info["corruptions"] = out.info.get("corruptions", []) + [{"kind": "longtail", "mu": mu, "seed": seed,
                                                                  "counts": keep_counts}]
    return out


def extract_meta_set(ds: LabeledDataset, per_class: int, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Draw a balanced set of clean instances and return ``(meta, remaining)``."""
    if per_class < 0:
        raise ValueError("per_class must be non-negative")
    clean = ds.labels == ds.clean_labels
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(clean & (ds.clean_labels == c))
        if len(members) < per_class:
            raise ValueError(f"class {c} has {len(members)} clean instances, need {per_class}")
        picked.append(np.sort(rng.choice(members, size=per_class, replace=False)))
    meta_idx = np.concatenate(picked) if picked else np.array([], dtype=np.int64)
    rest = np.setdiff1d(np.arange(len(ds)), meta_idx)
    meta = ds.subset(meta_idx)
    meta.info["role"] = "meta"
    return meta, ds.subset(rest)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "none"  # uniform | flip | none
    noise_ratio: float = 0.0
    imbalance: float = 1.0
    seed: int = 0
    order: str = "longtail-first"  # longtail-first | noise-first

    def __post_init__(self):
        if self.kind not in ("uniform", "flip", "none"):
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= self.noise_ratio < 1:
            raise ValueError("noise ratio must lie in [0, 1)")
        if not 0 < self.imbalance <= 1:
            raise ValueError("imbalance factor must lie in (0, 1]")
        if self.order not in ("longtail-first", "noise-first"):
            raise ValueError(f"unknown corruption order {self.order!r}")


def apply_corruption(ds: LabeledDataset, spec: CorruptionSpec) -> LabeledDataset:
    def noise(d):
        if spec.kind == "uniform":
            return inject_uniform_noise(d, spec.noise_ratio, spec.seed)
        if spec.kind == "flip":
            return inject_flip_noise(d, spec.noise_ratio, spec.seed)
        return d

    def tail(d):
        return make_longtail(d, spec.imbalance, spec.seed + 1) if spec.imbalance < 1 else d

    steps = (tail, noise) if spec.order == "longtail-first" else (noise, tail)
    for step in steps:
        ds = step(ds)
    return replace(ds, info={**ds.info, "corruption_order": spec.order})


class IdxFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (at byte offset {offset})")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise IdxFormatError(f"expected 4-byte magic, file has {len(raw)} bytes", 0)
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise IdxFormatError(f"magic must start with two zero bytes, got {zero:#06x}", 0)
    if dtype != IDX_UBYTE:
        raise IdxFormatError(f"only unsigned-byte data (0x08) is supported, got {dtype:#04x}", 2)
    if ndim == 0:
        raise IdxFormatError("zero dimensions", 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"expected {header} header bytes, got {len(raw)}", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(raw) - header
    if actual != expected:
        raise IdxFormatError(f"expected {expected} data bytes for dims {dims}, got {actual}", header)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("write_idx stores unsigned bytes only")
    header = struct.pack(">HBB", 0, IDX_UBYTE, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """MNIST-style image/label pair; pixels scaled to [0, 1] and flattened."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim < 2 or labels.ndim != 1:
        raise IdxFormatError("images need >= 2 dims and labels exactly 1", 3)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    lab = labels.astype(np.int64)
    c = int(lab.max()) + 1 if num_classes is None else num_classes
    if len(lab) and lab.max() >= c:
        raise ValueError(f"label {int(lab.max())} outside [0, {c})")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(x, lab.copy(), lab.copy(), c, np.arange(len(lab)),
                          {"generator": "idx", "images": str(images_path), "labels": str(labels_path)})
