"""Weight-dynamics statistics over one epoch of class-level weights.

Slot taxonomy per instance (observed label ``t``, clean label ``c``):

* clean (``t == c``): slot ``t`` is the target ``c_t``; every other slot is ``c_nt``.
* noisy (``t != c``): slot ``t`` is the target ``n_t``, slot ``c`` the true
  target ``n_tt``, the rest are ``n_nt``.

A weight "increased" when its second-stage value is strictly larger than the
stage-one value it was stepped from. Ratios over an epoch are pooled across
batches; an empty category yields NaN.
"""

from __future__ import annotations

import warnings

import numpy as np


def slot_taxonomy(label: int, clean_label: int, num_classes: int) -> list[str]:
    noisy = label != clean_label
    out = []
    for j in range(num_classes):
        if j == label:
            out.append("n_t" if noisy else "c_t")
        elif noisy and j == clean_label:
            out.append("n_tt")
        else:
            out.append("n_nt" if noisy else "c_nt")
    return out


def taxonomy_masks(targets: np.ndarray, clean: np.ndarray, num_classes: int) -> dict[str, np.ndarray]:
    n = len(targets)
    cols = np.arange(num_classes)[None, :]
    is_target = cols == targets[:, None]
    is_true = cols == clean[:, None]
    noisy = (targets != clean)[:, None]
    return {
        "c_t": is_target & ~noisy,
        "c_nt": ~is_target & ~noisy,
        "n_t": is_target & noisy,
        "n_tt": is_true & noisy,
        "n_nt": ~is_target & ~is_true & noisy,
    } if n else {k: np.zeros((0, num_classes), bool) for k in ("c_t", "c_nt", "n_t", "n_tt", "n_nt")}


def _ratio(mask: np.ndarray, inc: np.ndarray) -> float:
    total = int(mask.sum())
    return float((inc & mask).sum() / total) if total else float("nan")


def _stat(values: np.ndarray, fn) -> float:
    return float(fn(values)) if values.size else float("nan")


def weight_dynamics(before: np.ndarray, after: np.ndarray, targets: np.ndarray, clean: np.ndarray,
                    num_classes: int, mode: str = "gdw") -> dict:
    """One diagnostics row from pooled stage-one / second-stage weight matrices."""
    if mode not in ("gdw", "gdw-no-constraint"):
        warnings.warn(f"weight dynamics need class-level weights; mode {mode!r} has none", stacklevel=2)
        return {}
    targets = np.asarray(targets)
    clean = np.asarray(clean)
    inc = after > before
    masks = taxonomy_masks(targets, clean, num_classes)
    rows = np.arange(len(targets))
    wt = after[rows, targets]
    noisy = targets != clean
    out = {
        "wt_clean_mean": _stat(wt[~noisy], np.mean),
        "wt_clean_median": _stat(wt[~noisy], np.median),
        "wt_noisy_mean": _stat(wt[noisy], np.mean),
        "wt_noisy_median": _stat(wt[noisy], np.median),
        "inc_c_nt": _ratio(masks["c_nt"], inc),
        "inc_n_tt": _ratio(masks["n_tt"], inc),
        "inc_n_nt": _ratio(masks["n_nt"], inc),
        "n_c_nt": int(masks["c_nt"].sum()),
        "n_n_tt": int(masks["n_tt"].sum()),
        "n_n_nt": int(masks["n_nt"].sum()),
    }
    mat = class_increase_matrix(inc, targets, num_classes)
    for i in range(num_classes):
        for j in range(num_classes):
            out[f"inc_w{i}_on_c{j}"] = float(mat[i, j])
    return out


def class_increase_matrix(inc: np.ndarray, targets: np.ndarray, num_classes: int) -> np.ndarray:
    """``M[i, j]``: fraction of increased ``omega_i`` over instances labelled ``j``."""
    mat = np.full((num_classes, num_classes), np.nan)
    for j in range(num_classes):
        members = targets == j
        if members.any():
            mat[:, j] = inc[members].mean(axis=0)
    return mat
