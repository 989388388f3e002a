"""Acceptance gate: one test per criterion, each logging a PASS/FAIL line.

The lines are repeated in an "acceptance criteria" section at the end of the
pytest run. Criteria 6 to 9 share one five-seed run of every mode on the
noisy three-class preset (see the ``directional_runs`` fixture).
"""

import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np

from gdw.autodiff import Tape, Tensor, jvp_logits, softmax, softmax_xent
from gdw.classweights import ClassWeightMatrix, clone_weights, project_rows, weighted_probability
from gdw.cli import main as cli_main
from gdw.data import gen_gaussian_mixture, inject_flip_noise, inject_uniform_noise, longtail_counts, make_longtail
from gdw.engine import Trainer, forward_batch, meta_hypergradients, virtual_update
from gdw.experiment import PRESETS, build_datasets, preset
from gdw.models import classifier_logits, init_classifier

from conftest import record_criterion

GOLDEN = Path(__file__).parent / "golden"


def _xent(z, t):
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(t)), t]


def test_c01_softmax_xent_gradient():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n, c, h = 1000, 6, 1e-5
    z = rng.standard_normal((n, c)) * 3
    t = rng.integers(0, c, n)
    onehot = np.eye(c)[t]
    _, d1 = softmax_xent(Tensor(z), onehot)
    identity_err = float(np.abs(d1 - (softmax(z) - onehot)).max())
    fd = np.zeros_like(z)
    for j in range(c):
        e = np.zeros(c)
        e[j] = h
        fd[:, j] = (_xent(z + e, t) - _xent(z - e, t)) / (2 * h)
    fd_err = float(np.abs(d1 - fd).max())
    dt = time.perf_counter() - t0
    ok = identity_err <= 1e-8 and fd_err <= 1e-8 and dt < 5
    record_criterion(1, ok, f"max|d1-(p-y)|={identity_err:.2e} max|d1-fd|={fd_err:.2e} (<=1e-8) in {dt:.2f}s")
    assert ok


def test_c02_zero_mean_constraint():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    n, c = 10_000, 5
    p = rng.dirichlet(np.ones(c), n)
    t = rng.integers(0, c, n)
    om = rng.uniform(0, 2, (n, c))
    y = np.eye(c)[t]
    proj = project_rows(om, p, t)
    residual = float(np.abs((proj * (p - y)).sum(axis=1)).max())
    pp = weighted_probability(proj, p)
    shape_err = float(np.abs(proj[np.arange(n), t][:, None] * (pp - y) - proj * (p - y)).max())
    dt = time.perf_counter() - t0
    ok = residual <= 1e-12 and shape_err <= 1e-12 and dt < 5
    record_criterion(2, ok, f"max residual={residual:.2e} max shape err={shape_err:.2e} (<=1e-12) in {dt:.2f}s")
    assert ok


def _lockstep(a, b, iterations):
    first_diff = None
    done = 0
    while done < iterations:
        order = a.order_rng.permutation(len(a.train))
        assert np.array_equal(order, b.order_rng.permutation(len(b.train)))
        for start in range(0, len(order), a.config.batch_size):
            idx = order[start:start + a.config.batch_size]
            a.step(idx)
            b.step(idx)
            a.iteration += 1
            b.iteration += 1
            done += 1
            same = all(np.array_equal(x, y) for x, y in zip(a.theta.arrays() + a.phi.arrays(),
                                                             b.theta.arrays() + b.phi.arrays()))
            if not same and first_diff is None:
                first_diff = done
            if done == iterations:
                break
    return first_diff


def test_c03_instance_weighting_reduction():
    cfg = preset("noise-uniform")
    train, meta, test = build_datasets(cfg, cfg.seeds[0])
    gdw_cfg = dataclasses.replace(cfg.trainer_config("gdw", cfg.seeds[0]), lr_omega=0.0)
    gdw = Trainer(gdw_cfg, train, meta, test)
    iw = Trainer(cfg.trainer_config("instance-weighting", cfg.seeds[0]), train, meta, test)
    first_diff = _lockstep(gdw, iw, 200)
    ok = first_diff is None
    record_criterion(3, ok, "lr_omega=0 GDW vs scalar baseline bit-identical over 200 iterations"
                     if ok else f"trajectories diverge at iteration {first_diff}")
    assert ok


def test_c04_hypergradient_finite_differences():
    t0 = time.perf_counter()
    worst = 0.0
    lr, h = 0.1, 1e-4
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        theta = init_classifier(2, [16], 3, rng)
        x, y = rng.standard_normal((4, 2)), rng.integers(0, 3, 4)
        xv, yv = rng.standard_normal((4, 2)), rng.integers(0, 3, 4)
        om = clone_weights(rng.uniform(0.2, 1.0, 4), y, 3)
        batch = forward_batch(theta, x, y, 3)
        g = meta_hypergradients(theta, batch, virtual_update(theta, batch, om, lr), xv, yv, lr, 3).g

        def meta_loss(m):
            t_hat = virtual_update(theta, forward_batch(theta, x, y, 3), ClassWeightMatrix(m, y), lr)
            return _xent(classifier_logits(t_hat, xv).data, yv).mean()

        for i, j in np.ndindex(g.shape):
            up, dn = om.omega.copy(), om.omega.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd = (meta_loss(up) - meta_loss(dn)) / (2 * h)
            worst = max(worst, abs(g[i, j] - fd) / max(abs(g[i, j]), abs(fd)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt < 30
    record_criterion(4, ok, f"2-16-3 MLP, n=m=4, 5 seeds: max rel err={worst:.2e} (<=1e-4) in {dt:.2f}s")
    assert ok


def test_c05_jvp_vjp_duality():
    rng = np.random.default_rng(55)
    theta = init_classifier(6, [12, 8], 4, rng)
    x = rng.standard_normal((10, 6))
    worst = 0.0
    for _ in range(100):
        v = [rng.standard_normal(a.shape) for a in theta.arrays()]
        u = rng.standard_normal((10, 4))
        lhs = float((u * jvp_logits(theta.weights, theta.biases, v[0::2], v[1::2], x)).sum())
        tape = Tape()
        with tape:
            logits = classifier_logits(theta, x)
        theta.zero_grad()
        tape.vjp(logits, u)
        rhs = sum(float((a * g).sum()) for a, g in zip(v, theta.grads()))
        worst = max(worst, abs(lhs - rhs))
    ok = worst <= 1e-10
    record_criterion(5, ok, f"100 probes: max |<u,Jv> - <J^T u,v>| = {worst:.2e} (<=1e-10)")
    assert ok


def _means(summary):
    return {m: c["mean"] for m, c in summary["modes"].items()}


def test_c06_directional_accuracy(directional_runs):
    cfg, records, summary, timing = directional_runs
    margin = json.loads((GOLDEN / "directional_margin.json").read_text())["gdw_minus_plain_margin"]
    m = _means(summary)
    train, meta, _ = build_datasets(cfg, cfg.seeds[0])
    complete = all(summary["modes"][k]["n"] == 5 for k in ("gdw", "instance-weighting", "plain"))
    ok = (complete and len(train) == 600 and len(meta) == 30 and m["gdw"] >= m["instance-weighting"] >= m["plain"]
          and m["gdw"] - m["plain"] >= margin and timing["cpu"] < 600)
    record_criterion(6, ok, f"gdw={m['gdw']:.4f} iw={m['instance-weighting']:.4f} plain={m['plain']:.4f} "
                     f"gdw-plain={m['gdw'] - m['plain']:.4f} (margin {margin}) cpu={timing['cpu']:.0f}s")
    assert ok


def test_c07_weight_separation(directional_runs):
    _, records, _, _ = directional_runs
    gdw = [r for r in records if r.mode == "gdw"]
    wins = sum(r.epochs[-1]["wt_clean_mean"] > r.epochs[-1]["wt_noisy_mean"] for r in gdw)
    ok = len(gdw) == 5 and wins >= 4
    detail = ", ".join(f"{r.epochs[-1]['wt_clean_mean']:.3f}/{r.epochs[-1]['wt_noisy_mean']:.3f}" for r in gdw)
    record_criterion(7, ok, f"clean > noisy target weight in {wins}/5 seeds (clean/noisy: {detail})")
    assert ok


def test_c08_true_target_decline(directional_runs):
    _, records, _, _ = directional_runs
    gdw = [r for r in records if r.mode == "gdw"]
    ratios = [[e["inc_n_tt"] for e in r.epochs[-3:]] for r in gdw]
    worst = max(max(x) for x in ratios)
    ok = len(gdw) == 5 and all(len(x) == 3 and max(x) < 0.5 for x in ratios)
    record_criterion(8, ok, f"max increased-true-target ratio over last 3 epochs, 5 seeds = {worst:.3f} (<0.5)")
    assert ok


def test_c09_no_constraint_instability(directional_runs):
    _, records, summary, _ = directional_runs

    def mean_var(mode):
        return float(np.mean([e["batch_loss_var"] for r in records if r.mode == mode for e in r.epochs]))

    v_gdw, v_nc = mean_var("gdw"), mean_var("gdw-no-constraint")
    m = _means(summary)
    ok = v_nc > v_gdw and m["gdw-no-constraint"] <= m["gdw"]
    record_criterion(9, ok, f"loss variance nc={v_nc:.4f} > gdw={v_gdw:.4f}; "
                     f"accuracy nc={m['gdw-no-constraint']:.4f} <= gdw={m['gdw']:.4f}")
    assert ok


def test_c10_longtail_counts():
    grid_ok = True
    for n in (1, 7, 100, 500, 5000):
        for mu in (1.0, 0.5, 0.1, 0.02, 0.01):
            for c in (2, 3, 10, 50, 100):
                expect = [math.floor(n * mu ** (i / (c - 1)) + 0.5) for i in range(c)]
                grid_ok &= longtail_counts(n, mu, c) == expect
    ref = longtail_counts(5000, 0.1, 10)
    ds = make_longtail(gen_gaussian_mixture(10, 5000, 10, 2.0, seed=0), 0.1, seed=1)
    realized = ds.class_counts.tolist()
    ok = grid_ok and ref[0] == 5000 and ref[-1] == 500 and min(realized) == 500 and realized == ref
    record_criterion(10, ok, f"grid exact={grid_ok}; 5000/0.1/10 -> {ref[0]}..{ref[-1]}, realized min {min(realized)}")
    assert ok


def test_c11_noise_statistics():
    n = 10_000
    ds = gen_gaussian_mixture(10, n // 10, 10, 2.0, seed=3)
    lines, ok = [], True
    for p in (0.2, 0.4, 0.6):
        bound = 3 * math.sqrt(p * (1 - p) / n)
        for kind, fn in (("uniform", inject_uniform_noise), ("flip", inject_flip_noise)):
            frac = fn(ds, p, seed=int(p * 100)).noise_fraction
            ok &= abs(frac - p) <= bound
            lines.append(f"{kind}@{p}={frac:.4f}")
    record_criterion(11, ok, f"within 3 sigma ({', '.join(lines)})")
    assert ok


def test_c12_determinism(tmp_path):
    mismatched = []
    for name in sorted(PRESETS):
        outs = []
        for k in range(2):
            out = tmp_path / f"{name}-{k}"
            assert cli_main(["run", "--preset", name, "--seed", "1", "--out", str(out)]) == 0
            outs.append(out)
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
        for f in files:
            if (outs[0] / f).read_bytes() != (outs[1] / f).read_bytes():
                mismatched.append(f"{name}/{f}")
    ok = not mismatched
    record_criterion(12, ok, f"{len(PRESETS)} presets run twice, all CSV outputs byte-identical"
                     if ok else f"differing: {mismatched}")
    assert ok
