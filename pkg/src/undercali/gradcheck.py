"""Finite-difference verification of every hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffkit import Param, grad_check_worst
from .forecaster import LinearGridForecaster
from .gdc import CalibratorBlock, Expert
from .imts import GridSpec, MaskedBatch
from .uncertainty import UncertaintyEstimator, featurize

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    worst_param: str
    worst_index: tuple

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _result(component, loss, params) -> CheckResult:
    err, name, idx = grad_check_worst(loss, params)
    return CheckResult(component, float(err), name, idx)


def _perturb(params: list[Param], rng, scale=0.3):
    for p in params:
        p.value[...] = scale * rng.standard_normal(p.shape)


def _random_batch(rng, grid: GridSpec, b=3, p_obs=0.7):
    xm = (rng.uniform(size=(b, grid.l_in, grid.n_vars)) < p_obs).astype(float)
    qm = (rng.uniform(size=(b, grid.l_out, grid.n_vars)) < p_obs).astype(float)
    qm[:, 0, 0] = 1.0
    xv = rng.standard_normal(xm.shape) * xm
    yv = rng.standard_normal(qm.shape) * qm
    return MaskedBatch(xv, xm, qm, yv)


def check_calibrator(seed: int = 0) -> CheckResult:
    rng = np.random.Generator(np.random.Philox(seed))
    block = CalibratorBlock(5, 3, rng, name="cal")
    _perturb(block.params(), rng)
    V = rng.standard_normal((3, 5, 3))
    R = rng.standard_normal((3, 5, 3))

    def loss():
        out, cache = block.forward(V)
        block.backward(cache, R + out)
        return float(np.sum(R * out) + 0.5 * np.sum(out * out))

    return _result("calibrator", loss, block.params())


def check_expert(seed: int = 0, loss_norm: str = "per_obs") -> CheckResult:
    """Expert loss through a frozen linear forecaster, into both calibrators."""
    rng = np.random.Generator(np.random.Philox(seed + 1))
    grid = GridSpec(l_in=5, l_out=3, n_vars=2, lookback=5.0, horizon=3.0)
    f = LinearGridForecaster(grid, 0.3 * rng.standard_normal((2, 3, 10)), 0.1 * rng.standard_normal((2, 3)))
    f.freeze()
    expert = Expert(grid.l_in, grid.l_out, grid.n_vars, 1e-3, rng, "reliable")
    _perturb(expert.params(), rng)
    batch = _random_batch(rng, grid)

    def loss():
        return expert.loss_and_grad(f, batch, loss_norm, train_input=True)

    return _result(f"expert[{loss_norm}]", loss, expert.params())


def check_uncertainty(seed: int = 0) -> CheckResult:
    """L1 objective with targets kept at least 0.05 away from the estimate (off the kink)."""
    rng = np.random.Generator(np.random.Philox(seed + 2))
    grid = GridSpec(l_in=3, l_out=2, n_vars=2, lookback=3.0, horizon=2.0)
    ue = UncertaintyEstimator(grid, rng, hidden=(6, 5))
    _perturb(ue.params(), rng, 0.5)
    batch = _random_batch(rng, grid, b=4)
    pred = rng.standard_normal(batch.q_mask.shape)
    feats = featurize(batch.x_values, batch.x_mask, pred, batch.q_mask)
    uh = ue.score(feats)
    u = np.clip(uh + rng.choice([-1.0, 1.0], size=uh.shape) * rng.uniform(0.05, 0.2, size=uh.shape), 0, 1)
    u = np.where(np.abs(u - uh) < 0.05, uh + np.where(uh > 0.5, -0.1, 0.1), u)

    def loss():
        return ue.l1_loss_and_grad(feats, u)

    return _result("uncertainty", loss, ue.params())


def run_gradchecks(seed: int = 0) -> list[CheckResult]:
    return [
        check_calibrator(seed),
        check_expert(seed, "per_obs"),
        check_expert(seed, "raw"),
        check_uncertainty(seed),
    ]
