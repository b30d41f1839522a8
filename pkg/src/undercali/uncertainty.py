"""Uncertainty estimator: regresses the min-max normalized prediction error of a sample.

The score is a control signal for routing and triggering, not a correction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffkit import Mlp, adam_step, load_checkpoint, load_into, restore, save_checkpoint, snapshot, zero_grads
from .forecaster import SourceForecaster
from .imts import GridSpec, MaskedBatch, checksum, per_sample_sq_norm

log = logging.getLogger(__name__)

RANGE_MODES = ("expanding", "frozen")


@dataclass
class RunningRange:
    """Expanding min/max of the raw squared error used to normalize targets."""

    delta_min: float = 0.0
    delta_max: float = 0.0
    initialized: bool = False

    def expand(self, deltas):
        deltas = np.atleast_1d(np.asarray(deltas, dtype=np.float64))
        if deltas.size == 0:
            return
        lo, hi = float(deltas.min()), float(deltas.max())
        if not self.initialized:
            self.delta_min, self.delta_max, self.initialized = lo, hi, True
        else:
            self.delta_min = min(self.delta_min, lo)
            self.delta_max = max(self.delta_max, hi)

    def normalize(self, deltas) -> np.ndarray:
        deltas = np.asarray(deltas, dtype=np.float64)
        span = self.delta_max - self.delta_min
        if not self.initialized or span <= 0:
            return np.zeros_like(deltas)
        return np.clip((deltas - self.delta_min) / span, 0.0, 1.0)


def uncertainty_target(rng: RunningRange, pred, target, mask, expand: bool = True) -> np.ndarray:
    """Per-sample normalized error; the range is widened to cover the batch first."""
    deltas = per_sample_sq_norm(np.asarray(pred), np.asarray(target), np.asarray(mask))
    if expand:
        rng.expand(deltas)
    return rng.normalize(deltas)


def featurize(x_values, x_mask, pred, q_mask) -> np.ndarray:
    """[lookback values*mask, lookback mask, prediction, query mask], flattened per sample."""
    x_values, x_mask, pred, q_mask = (np.asarray(a, dtype=np.float64) for a in (x_values, x_mask, pred, q_mask))
    if x_values.shape != x_mask.shape or pred.shape != q_mask.shape:
        raise ValueError(f"shape mismatch: {x_values.shape}/{x_mask.shape}, {pred.shape}/{q_mask.shape}")
    single = x_values.ndim == 2
    if single:
        x_values, x_mask, pred, q_mask = x_values[None], x_mask[None], pred[None], q_mask[None]
    b = x_values.shape[0]
    feats = np.concatenate(
        [(x_values * x_mask).reshape(b, -1), x_mask.reshape(b, -1), pred.reshape(b, -1), q_mask.reshape(b, -1)],
        axis=1,
    )
    return feats[0] if single else feats


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class PretrainConfig:
    epochs: int = 300
    patience: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0


@dataclass
class PretrainHistory:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


class UncertaintyEstimator:
    def __init__(self, grid: GridSpec, rng: np.random.Generator, hidden=(64, 64), lr: float = 1e-3,
                 range_mode: str = "expanding"):
        if range_mode not in RANGE_MODES:
            raise ValueError(f"range_mode must be one of {RANGE_MODES}")
        self.grid = grid
        self.width = 2 * grid.l_in * grid.n_vars + 2 * grid.l_out * grid.n_vars
        self.mlp = Mlp.build([self.width, *hidden, 1], rng, hidden="tanh", name="ue")
        self.range = RunningRange()
        self.lr = lr
        self.range_mode = range_mode

    def params(self):
        return self.mlp.params()

    def checksum(self) -> str:
        return checksum(p.value for p in self.params())

    def estimate(self, x_values, x_mask, pred, q_mask) -> np.ndarray:
        return self.score(featurize(x_values, x_mask, pred, q_mask))

    def score(self, feats) -> np.ndarray:
        return _sigmoid(self.mlp(feats)[..., 0])

    def l1_loss_and_grad(self, feats, u) -> float:
        """Mean |u_hat - u|; accumulates gradients."""
        z, cache = self.mlp.forward(feats)
        uh = _sigmoid(z[:, 0])
        r = uh - u
        loss = float(np.mean(np.abs(r)))
        dz = (np.sign(r) / len(u) * uh * (1.0 - uh))[:, None]
        self.mlp.backward(cache, dz)
        return loss

    def target(self, pred, target, mask) -> np.ndarray:
        return uncertainty_target(self.range, pred, target, mask, expand=self.range_mode == "expanding")

    def fit_steps(self, feats, u, n_steps: int) -> float | None:
        params = self.params()
        snaps = snapshot(params)
        zero_grads(params)
        loss = None
        for _ in range(n_steps):
            loss = self.l1_loss_and_grad(feats, u)
            if not np.isfinite(loss):
                log.warning("uncertainty estimator: non-finite loss, update skipped")
                restore(params, snaps)
                return None
            adam_step(params, self.lr)
        return loss

    def update_online(self, batch: MaskedBatch, calibrated_pred, n_steps: int = 5) -> float | None:
        """Fit the reliable subset's estimated scores to their realized normalized error."""
        if len(batch) == 0 or n_steps <= 0:
            return None
        u = self.target(calibrated_pred, batch.y_values, batch.q_mask)
        feats = featurize(batch.x_values, batch.x_mask, calibrated_pred, batch.q_mask)
        return self.fit_steps(feats, u, n_steps)

    def save(self, path):
        g = self.grid
        meta = {
            "grid": [g.l_in, g.l_out, g.n_vars, g.lookback, g.horizon],
            "hidden": [layer.out_features for layer in self.mlp.layers[:-1]],
            "range": [self.range.delta_min, self.range.delta_max, self.range.initialized],
            "lr": self.lr,
        }
        save_checkpoint(path, {p.name: p.value for p in self.params()}, meta)

    @classmethod
    def load(cls, path, range_mode: str = "expanding") -> "UncertaintyEstimator":
        tensors, meta = load_checkpoint(path)
        ue = cls(GridSpec(*meta["grid"]), np.random.Generator(np.random.Philox(0)),
                 hidden=tuple(meta["hidden"]), lr=meta["lr"], range_mode=range_mode)
        load_into(ue.params(), tensors)
        lo, hi, init = meta["range"]
        ue.range = RunningRange(float(lo), float(hi), bool(init))
        return ue


def pretrain(ue: UncertaintyEstimator, f: SourceForecaster, train: MaskedBatch, valid: MaskedBatch,
             cfg: PretrainConfig = PretrainConfig()) -> PretrainHistory:
    """Offline L1 regression onto the source forecaster's normalized errors."""
    if len(train) == 0:
        raise ValueError("empty training set")
    pred_tr = f.predict(train.x_values, train.x_mask, train.q_mask)
    pred_va = f.predict(valid.x_values, valid.x_mask, valid.q_mask)
    ue.range = RunningRange()
    u_tr = uncertainty_target(ue.range, pred_tr, train.y_values, train.q_mask, expand=True)
    u_va = uncertainty_target(ue.range, pred_va, valid.y_values, valid.q_mask, expand=False)
    x_tr = featurize(train.x_values, train.x_mask, pred_tr, train.q_mask)
    x_va = featurize(valid.x_values, valid.x_mask, pred_va, valid.q_mask)

    rng = np.random.Generator(np.random.Philox(cfg.seed))
    params = ue.params()
    hist = PretrainHistory()
    best, best_vals, bad = np.inf, [p.value.copy() for p in params], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo: lo + cfg.batch_size]
            zero_grads(params)
            losses.append(ue.l1_loss_and_grad(x_tr[idx], u_tr[idx]))
            adam_step(params, cfg.lr)
        hist.train_loss.append(float(np.mean(losses)))
        vloss = float(np.mean(np.abs(ue.score(x_va) - u_va))) if len(valid) else hist.train_loss[-1]
        hist.valid_loss.append(vloss)
        if vloss < best:
            best, best_vals, bad = vloss, [p.value.copy() for p in params], 0
            hist.best_epoch = epoch
        else:
            bad += 1
            if bad >= cfg.patience:
                hist.stopped_early = True
                break
    for p, v in zip(params, best_vals):
        p.value[...] = v
    for p in params:
        p.adam_m.fill(0.0)
        p.adam_v.fill(0.0)
        p.step_count = 0
    log.info("uncertainty estimator trained: best epoch %d, valid L1 %.4g", hist.best_epoch, best)
    return hist
