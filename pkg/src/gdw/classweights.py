"""Class-level weights on the softmax cross-entropy logit gradient.

Each training instance carries one weight per class. The logit gradient
``p - y`` is multiplied elementwise by those weights; the zero-mean
constraint then solves for the target-position weight so the weighted
gradient keeps the ``w_t * (p' - y)`` shape of a cross-entropy gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, DimensionError

DEGENERATE_EPS = 1e-12
ZERO_GRAD_EPS = 1e-12


class DegenerateProbabilityError(ValueError):
    pass


@dataclass
class ClassWeightMatrix:
    omega: np.ndarray  # (n, C)
    targets: np.ndarray  # (n,) observed label per row
    stage: str = "first"

    def __post_init__(self):
        if self.omega.ndim != 2 or self.targets.shape != (self.omega.shape[0],):
            raise DimensionError(f"omega {self.omega.shape} and targets {self.targets.shape} disagree")
        if self.stage not in ("first", "second"):
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def target_weights(self) -> np.ndarray:
        return self.omega[np.arange(len(self.targets)), self.targets]


def clone_weights(w: np.ndarray, targets: np.ndarray, num_classes: int) -> ClassWeightMatrix:
    """First-stage weights: the scalar instance weight repeated across classes."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    omega = np.repeat(w[:, None], num_classes, axis=1)
    return ClassWeightMatrix(omega, np.asarray(targets), "first")


def manipulate_d1(d1: np.ndarray, omega) -> np.ndarray:
    om = omega.omega if isinstance(omega, ClassWeightMatrix) else np.asarray(omega, dtype=np.float64)
    if om.shape != d1.shape:
        raise DimensionError(f"weights {om.shape} and d1 {d1.shape} differ")
    if np.any(om < 0):
        raise ContractError("class-level weights must be non-negative")
    return om * d1


def weighted_probability(omega_row: np.ndarray, p_row: np.ndarray) -> np.ndarray:
    wp = np.asarray(omega_row, dtype=np.float64) * np.asarray(p_row, dtype=np.float64)
    total = wp.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateProbabilityError("sum of weighted probabilities is not positive")
    return wp / total


def zero_mean_project(omega_row: np.ndarray, p_row: np.ndarray, t: int) -> np.ndarray:
    """Replace the target weight so that ``sum_j w_j (p_j - y_j) == 0``.

    The new target weight is the probability-weighted mean of the
    non-target weights. It is written as a shift from the current target
    weight, which leaves class-uniform rows bit-for-bit unchanged.
    """
    omega_row = np.asarray(omega_row, dtype=np.float64)
    p_row = np.asarray(p_row, dtype=np.float64)
    if omega_row.shape != p_row.shape or omega_row.ndim != 1:
        raise DimensionError(f"row shapes {omega_row.shape} and {p_row.shape} differ")
    if p_row[t] >= 1.0 - DEGENERATE_EPS:
        raise DegenerateProbabilityError(f"target probability {p_row[t]!r} is too close to 1")
    out = omega_row.copy()
    rest = np.arange(len(p_row)) != t
    base = omega_row[t]
    out[t] = max(base + ((omega_row[rest] - base) * p_row[rest]).sum() / p_row[rest].sum(), 0.0)
    return out


def project_rows(omega: np.ndarray, p: np.ndarray, targets: np.ndarray,
                 fallback: np.ndarray | None = None) -> np.ndarray:
    """Vectorized :func:`zero_mean_project` over a batch.

    Rows whose target probability is degenerate are replaced by the matching
    row of ``fallback`` (or left untouched when no fallback is given).
    """
    n, _ = omega.shape
    rows = np.arange(n)
    mask = np.ones_like(omega, dtype=bool)
    mask[rows, targets] = False
    base = omega[rows, targets]
    p_rest = np.where(mask, p, 0.0)
    shift = ((omega - base[:, None]) * p_rest).sum(axis=1)
    denom = p_rest.sum(axis=1)
    out = omega.copy()
    degenerate = p[rows, targets] >= 1.0 - DEGENERATE_EPS
    ok = ~degenerate
    # all-zero non-target weights can round the shift a hair past -base
    out[rows[ok], targets[ok]] = np.maximum(base[ok] + shift[ok] / denom[ok], 0.0)
    if fallback is not None and degenerate.any():
        out[degenerate] = fallback[degenerate]
    return out


def zero_mean_residual(omega: np.ndarray, p: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row ``sum_j w_j (p_j - y_j)``; zero when the constraint holds."""
    y = np.zeros_like(p)
    y[np.arange(len(targets)), targets] = 1.0
    return (omega * (p - y)).sum(axis=1)


def normalized_clipped_step(g: np.ndarray, clip: float) -> np.ndarray:
    """Row-wise ``clip(g / ||g||_1, -c, c)``; rows with ``||g||_1 < 1e-12`` give a zero step."""
    if clip <= 0:
        raise ValueError("clip bound must be positive")
    norms = np.abs(g).sum(axis=1, keepdims=True)
    live = norms > ZERO_GRAD_EPS
    safe = np.where(live, norms, 1.0)
    return np.where(live, np.clip(g / safe, -clip, clip), 0.0)


def second_stage_weights(omega: ClassWeightMatrix, g: np.ndarray, p: np.ndarray,
                         lr_omega: float, clip: float = 0.2, project: bool = True) -> ClassWeightMatrix:
    """One normalized, clipped descent step on the class-level weights.

    Entries are clamped at zero before the zero-mean projection. With
    ``project=False`` the projection is skipped (the no-constraint ablation).
    """
    if g.shape != omega.omega.shape or p.shape != g.shape:
        raise DimensionError(f"g {g.shape}, p {p.shape} and omega {omega.omega.shape} must match")
    step = normalized_clipped_step(g, clip)
    new = np.maximum(omega.omega - lr_omega * step, 0.0)
    if project:
        new = project_rows(new, p, omega.targets, fallback=omega.omega)
    return ClassWeightMatrix(new, omega.targets, "second")


def split_weighted_d1(omega_row: np.ndarray, p_row: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``w * (p - y)`` into the cross-entropy-shaped part and the residual.

    Returns ``(w_t * (p' - y), (sum_k w_k p_k - w_t) * p')``; their sum is the
    manipulated logit gradient for any weights, constrained or not.
    """
    p_prime = weighted_probability(omega_row, p_row)
    y = np.zeros_like(p_row, dtype=np.float64)
    y[t] = 1.0
    wt = omega_row[t]
    return wt * (p_prime - y), (float(np.dot(omega_row, p_row)) - wt) * p_prime
