import os
import resource
import time

import numpy as np
import pytest

from gdw.data import extract_meta_set, gen_gaussian_mixture, inject_uniform_noise
from gdw.experiment import preset, run_experiment


def small_problem(seed=0, per_class=40, dim=4, noise=0.4, meta_per_class=5):
    pool = gen_gaussian_mixture(3, per_class, dim, 3.0, seed)
    meta, rest = extract_meta_set(pool, meta_per_class, seed + 1)
    train = inject_uniform_noise(rest, noise, seed + 2)
    test = gen_gaussian_mixture(3, 30, dim, 3.0, seed + 3)
    return train, meta, test


@pytest.fixture
def problem():
    return small_problem()


@pytest.fixture(scope="session")
def directional_runs():
    """Every mode on the five-seed 40%-uniform-noise preset, shared across tests."""
    cfg = preset("noise-uniform")
    jobs = max(1, min(4, os.cpu_count() or 1))
    cpu0 = _cpu_seconds()
    wall0 = time.perf_counter()
    records, summary = run_experiment(cfg, jobs=jobs, write=False)
    timing = {"cpu": _cpu_seconds() - cpu0, "wall": time.perf_counter() - wall0}
    return cfg, records, summary, timing


def _cpu_seconds():
    # worker processes are reaped when the pool shuts down, so their time lands in RUSAGE_CHILDREN
    total = 0.0
    for who in (resource.RUSAGE_SELF, resource.RUSAGE_CHILDREN):
        ru = resource.getrusage(who)
        total += ru.ru_utime + ru.ru_stime
    return total


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def assert_params_equal(a, b):
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
