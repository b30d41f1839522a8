import time

import numpy as np
import pytest

from undercali.imts import GridSpec, MaskedBatch
from undercali.pipeline import shift_benchmark

BENCH_SEEDS = (0, 1, 2, 3, 4)


def philox(seed):
    return np.random.Generator(np.random.Philox(seed))


def random_batch(rng, grid: GridSpec, b=4, p_obs=0.7, targets=True):
    xm = (rng.uniform(size=(b, grid.l_in, grid.n_vars)) < p_obs).astype(float)
    qm = (rng.uniform(size=(b, grid.l_out, grid.n_vars)) < p_obs).astype(float)
    qm[:, 0, 0] = 1.0
    xv = rng.standard_normal(xm.shape) * xm
    yv = rng.standard_normal(qm.shape) * qm if targets else None
    return MaskedBatch(xv, xm, qm, yv)


BENCH_BUILD_SECONDS: list[float] = []


@pytest.fixture(scope="session")
def bench():
    """Prepared forecaster, estimator and online stream for each benchmark seed."""
    t0 = time.perf_counter()
    out = {s: shift_benchmark(s) for s in BENCH_SEEDS}
    BENCH_BUILD_SECONDS.append(time.perf_counter() - t0)
    return out


@pytest.fixture(scope="session")
def small_bench():
    return shift_benchmark(0, n_samples=200)


# acceptance criteria report their verdicts here; printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, title: str, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
