"""Source forecasters: the frozen model that the calibrators wrap.

Every forecaster maps a batch of gridded lookback windows ``(B, L_in, C)`` and
query masks ``(B, L_out, C)`` to predictions ``(B, L_out, C)``.  Predictions are
produced at every query cell, observed or not; masking happens downstream.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffkit import Param, ShapeError, adam_step, load_checkpoint, save_checkpoint, zero_grads
from .imts import GridSpec, GriddedWindow, MaskedBatch, checksum, iter_batches

log = logging.getLogger(__name__)


class FrozenError(RuntimeError):
    pass


class SourceForecaster:
    """Base class.  Subclasses set ``kind`` and implement ``_predict``.

    A forecaster that can propagate gradients to its lookback values sets
    ``differentiable = True`` and implements ``input_grad``.  Parameters are
    never updated through that path.
    """

    kind = "base"
    differentiable = False

    def __init__(self, grid: GridSpec):
        self.grid = grid
        self.frozen = False

    def _check(self, x_values, x_mask, q_mask):
        g = self.grid
        if x_values.shape[1:] != (g.l_in, g.n_vars) or x_mask.shape != x_values.shape:
            raise ShapeError(f"lookback shape {x_values.shape} does not match grid ({g.l_in}, {g.n_vars})")
        if q_mask.shape[1:] != (g.l_out, g.n_vars) or q_mask.shape[0] != x_values.shape[0]:
            raise ShapeError(f"query shape {q_mask.shape} does not match grid ({g.l_out}, {g.n_vars})")

    def predict(self, x_values, x_mask, q_mask) -> np.ndarray:
        self._check(x_values, x_mask, q_mask)
        return self._predict(x_values, x_mask, q_mask)

    def predict_window(self, lookback: GriddedWindow, query: GriddedWindow) -> np.ndarray:
        return self.predict(lookback.values[None], lookback.mask[None], query.mask[None])[0]

    def _predict(self, x_values, x_mask, q_mask):
        raise NotImplementedError

    def input_grad(self, x_values, x_mask, q_mask, dy) -> np.ndarray:
        raise NotImplementedError(f"{self.kind} forecaster is not differentiable")

    def params(self) -> list[Param]:
        return []

    def freeze(self):
        self.frozen = True
        return self

    def checksum(self) -> str:
        return checksum(p.value for p in self.params())

    def save(self, path):
        g = self.grid
        meta = {"kind": self.kind, "grid": [g.l_in, g.l_out, g.n_vars, g.lookback, g.horizon]}
        save_checkpoint(path, {p.name: p.value for p in self.params()}, meta)


class LocfForecaster(SourceForecaster):
    """Last observation carried forward, per variable; 0 when a variable has no lookback data."""

    kind = "locf"
    differentiable = True

    def __init__(self, grid: GridSpec):
        super().__init__(grid)
        self.frozen = True

    @staticmethod
    def _last(x_mask):
        L = x_mask.shape[1]
        last = L - 1 - np.argmax(x_mask[:, ::-1, :] > 0, axis=1)  # (B, C)
        has = x_mask.max(axis=1) > 0
        return last, has

    def _predict(self, x_values, x_mask, q_mask):
        last, has = self._last(x_mask)
        vals = np.take_along_axis(x_values, last[:, None, :], axis=1)[:, 0, :]
        vals = np.where(has, vals, 0.0)
        return np.broadcast_to(vals[:, None, :], q_mask.shape).copy()

    def input_grad(self, x_values, x_mask, q_mask, dy):
        last, has = self._last(x_mask)
        dx = np.zeros_like(x_values)
        b, c = np.nonzero(has)
        dx[b, last[b, c], c] = dy.sum(axis=1)[b, c]
        return dx


class LinearGridForecaster(SourceForecaster):
    """Per-variable affine map from [masked lookback column, mask column] to the forecast column."""

    kind = "linear"
    differentiable = True

    def __init__(self, grid: GridSpec, weight=None, bias=None):
        super().__init__(grid)
        C, Li, Lo = grid.n_vars, grid.l_in, grid.l_out
        self.A = Param(np.zeros((C, Lo, 2 * Li)) if weight is None else weight, "forecaster.A")
        self.d = Param(np.zeros((C, Lo)) if bias is None else bias, "forecaster.d")
        if self.A.shape != (C, Lo, 2 * Li) or self.d.shape != (C, Lo):
            raise ShapeError("linear forecaster parameter shapes do not match grid")

    def _features(self, x_values, x_mask):
        # (B, C, 2*L_in)
        return np.concatenate([(x_values * x_mask).transpose(0, 2, 1), x_mask.transpose(0, 2, 1)], axis=2)

    def _predict(self, x_values, x_mask, q_mask):
        feat = self._features(x_values, x_mask)
        y = np.einsum("clk,bck->blc", self.A.value, feat)
        return y + self.d.value.T[None]

    def input_grad(self, x_values, x_mask, q_mask, dy):
        dfeat = np.einsum("clk,blc->bck", self.A.value, dy)
        return dfeat[:, :, : self.grid.l_in].transpose(0, 2, 1) * x_mask

    def _param_grad(self, x_values, x_mask, dy):
        feat = self._features(x_values, x_mask)
        self.A.grad += np.einsum("blc,bck->clk", dy, feat)
        self.d.grad += dy.sum(axis=0).T

    def params(self) -> list[Param]:
        return [self.A, self.d]


def load_forecaster(path) -> SourceForecaster:
    tensors, meta = load_checkpoint(path)
    grid = GridSpec(*meta["grid"])
    kind = meta.get("kind")
    if kind == "locf":
        return LocfForecaster(grid)
    if kind == "linear":
        f = LinearGridForecaster(grid, tensors["forecaster.A"], tensors["forecaster.d"])
        return f.freeze()
    raise ValueError(f"{path}: unknown forecaster kind {kind!r}")


def make_forecaster(kind: str, grid: GridSpec) -> SourceForecaster:
    if kind == "locf":
        return LocfForecaster(grid)
    if kind == "linear":
        return LinearGridForecaster(grid)
    raise ValueError(f"unknown forecaster kind {kind!r}")


@dataclass
class TrainConfig:
    epochs: int = 300
    patience: int = 5
    lr: float = 1e-2
    batch_size: int = 32
    seed: int = 0


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def _masked_mse_grad(pred, y, mask):
    n = mask.sum()
    diff = (pred - y) * mask
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def train_offline(f: LinearGridForecaster, train: MaskedBatch, valid: MaskedBatch,
                  cfg: TrainConfig = TrainConfig()) -> TrainHistory:
    """Fit with Adam on masked MSE, keep the best-validation parameters, then freeze."""
    if f.frozen:
        raise FrozenError("forecaster is already frozen")
    if len(train) == 0 or train.q_mask.sum() == 0:
        raise ValueError("empty training set")
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    hist = TrainHistory()
    best, best_vals, bad = np.inf, None, 0
    params = f.params()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        losses = []
        for lo in range(0, len(train), cfg.batch_size):
            mb = train.subset(order[lo: lo + cfg.batch_size])
            if mb.q_mask.sum() == 0:
                continue
            pred = f.predict(mb.x_values, mb.x_mask, mb.q_mask)
            loss, dy = _masked_mse_grad(pred, mb.y_values, mb.q_mask)
            zero_grads(params)
            f._param_grad(mb.x_values, mb.x_mask, dy)
            adam_step(params, cfg.lr)
            losses.append(loss)
        hist.train_loss.append(float(np.mean(losses)))
        vloss = evaluate_mse(f, valid)
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
    log.info("forecaster trained: best epoch %d, valid mse %.5g", hist.best_epoch, best)
    f.freeze()
    return hist


def evaluate_mse(f: SourceForecaster, data: MaskedBatch, batch_size: int = 256) -> float:
    sse, n = 0.0, 0.0
    for mb in iter_batches(data, batch_size):
        pred = f.predict(mb.x_values, mb.x_mask, mb.q_mask)
        diff = (pred - mb.y_values) * mb.q_mask
        sse += float(np.sum(diff * diff))
        n += float(mb.q_mask.sum())
    if n == 0:
        raise ValueError("empty target")
    return sse / n
