"""Regenerate the golden files under tests/golden and tests/data.

Run from the repository root after a verified build:

    python3 scripts/make_goldens.py            # everything
    python3 scripts/make_goldens.py --skip-margin

The directional margin uses reference seeds that are disjoint from the seeds
the acceptance suite runs on, so the threshold is not fitted to the runs it
judges.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from gdw.data import gen_gaussian_mixture, read_idx, write_idx
from gdw.experiment import preset, run_experiment
from gdw.models import init_weighting_net, weighting_net

ROOT = Path(__file__).resolve().parent.parent
GOLDEN = ROOT / "tests" / "golden"
DATA = ROOT / "tests" / "data"
REFERENCE_SEEDS = [2, 3, 5, 7, 11]


def idx_reference() -> dict:
    rng = np.random.default_rng(7)
    images = rng.integers(0, 256, size=(20, 4, 4), dtype=np.uint8)
    labels = (np.arange(20) % 3).astype(np.uint8)
    write_idx(DATA / "ref-images.idx3-ubyte", images)
    write_idx(DATA / "ref-labels.idx1-ubyte", labels)
    back = read_idx(DATA / "ref-images.idx3-ubyte")
    return {"first10_sha256": hashlib.sha256(back[:10].tobytes()).hexdigest(),
            "shape": list(back.shape)}


def weighting_golden() -> dict:
    phi = init_weighting_net(np.random.default_rng(0))
    losses = [0.1, 1.0, 10.0]
    out = weighting_net(phi, np.array(losses)).data[:, 0]
    return {"losses": losses, "weights": [float(w) for w in out]}


def dataset_golden() -> dict:
    ds = gen_gaussian_mixture(3, 50, 5, 3.0, seed=123)
    return {"args": [3, 50, 5, 3.0, 123], "fingerprint": ds.fingerprint()}


def directional_margin() -> dict:
    cfg = preset("noise-uniform", seeds=REFERENCE_SEEDS, modes=["gdw", "plain"])
    _, summary = run_experiment(cfg, jobs=4, write=False)
    gdw = summary["modes"]["gdw"]["final_accuracy"]
    plain = summary["modes"]["plain"]["final_accuracy"]
    diffs = np.array([gdw[s] - plain[s] for s in gdw])
    se = diffs.std(ddof=1) / math.sqrt(len(diffs))
    margin = max(0.0, math.floor((diffs.mean() - 3 * se) * 1000) / 1000)
    return {"reference_seeds": REFERENCE_SEEDS, "per_seed_gdw_minus_plain": diffs.tolist(),
            "mean": float(diffs.mean()), "stderr": float(se),
            "rule": "floor_3dp(mean - 3 * stderr), at least 0", "gdw_minus_plain_margin": margin}


def smoke_summary() -> dict:
    _, summary = run_experiment(preset("smoke"), write=False)
    return summary


def dump(name: str, obj) -> None:
    (GOLDEN / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    print(f"wrote tests/golden/{name}")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--skip-margin", action="store_true", help="skip the slow reference runs")
    args = ap.parse_args()
    GOLDEN.mkdir(parents=True, exist_ok=True)
    DATA.mkdir(parents=True, exist_ok=True)
    dump("idx_reference.json", idx_reference())
    dump("weighting_net_seed0.json", weighting_golden())
    dump("gaussian_mixture_hash.json", dataset_golden())
    dump("smoke_summary.json", smoke_summary())
    if not args.skip_margin:
        dump("directional_margin.json", directional_margin())


if __name__ == "__main__":
    main()
