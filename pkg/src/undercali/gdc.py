"""Dual-expert gated distribution calibrator.

A calibrator block transforms an ``L x C`` window residually::

    out = V + tanh(gate) * MLP(concat_c(W_c @ V[:, c] + b_c))

with the MLP applied to each time slot's C-vector.  An expert wraps a frozen
source forecaster with one block on its input and one on its output.
"""
from __future__ import annotations

import logging

import numpy as np

from .diffkit import (Mlp, Param, ShapeError, adam_step, load_checkpoint, load_into, restore,
                      save_checkpoint, snapshot, zero_grads)
from .forecaster import SourceForecaster
from .imts import MaskedBatch, checksum

log = logging.getLogger(__name__)

GATE_INIT = 0.01
LOSS_NORMS = ("per_obs", "raw")
INPUT_CALI = ("full_grad", "frozen")


class CalibratorBlock:
    def __init__(self, window_len: int, n_vars: int, rng: np.random.Generator,
                 hidden_bias_scale: float = 1.0, name: str = "cal"):
        L, C = window_len, n_vars
        self.window_len, self.n_vars = L, C
        self.W = Param(np.zeros((C, L, L)), f"{name}.W")
        self.b = Param(np.zeros((C, L)), f"{name}.b")
        self.mlp = Mlp.build([C, 2 * C, C], rng, hidden="tanh", zero_last=True,
                             hidden_bias_scale=hidden_bias_scale, name=f"{name}.mlp")
        self.gate = Param(np.full(C, GATE_INIT), f"{name}.gate")

    def forward(self, V):
        V = np.asarray(V, dtype=np.float64)
        single = V.ndim == 2
        if single:
            V = V[None]
        if V.shape[1:] != (self.window_len, self.n_vars):
            raise ShapeError(f"block expects (*, {self.window_len}, {self.n_vars}), got {V.shape}")
        Z = np.einsum("clk,bkc->blc", self.W.value, V) + self.b.value.T[None]
        M, mlp_cache = self.mlp.forward(Z)
        g = np.tanh(self.gate.value)
        out = V + g * M
        cache = (V, M, g, mlp_cache, single)
        return (out[0] if single else out), cache

    def __call__(self, V):
        return self.forward(V)[0]

    def backward(self, cache, dout):
        V, M, g, mlp_cache, single = cache
        if single:
            dout = dout[None]
        self.gate.grad += np.sum(dout * M, axis=(0, 1)) * (1.0 - g * g)
        dZ = self.mlp.backward(mlp_cache, dout * g)
        self.W.grad += np.einsum("blc,bkc->clk", dZ, V)
        self.b.grad += dZ.sum(axis=0).T
        dV = dout + np.einsum("clk,blc->bkc", self.W.value, dZ)
        return dV[0] if single else dV

    def params(self) -> list[Param]:
        return [self.W, self.b, *self.mlp.params(), self.gate]


def calibrate(block: CalibratorBlock, V):
    return block.forward(V)


class Expert:
    """Input and output calibrators around a frozen forecaster, with their own Adam state."""

    def __init__(self, l_in: int, l_out: int, n_vars: int, lr: float, rng: np.random.Generator,
                 role: str = "reliable", hidden_bias_scale: float = 1.0):
        self.role = role
        self.lr = lr
        self.input_calibrator = CalibratorBlock(l_in, n_vars, rng, hidden_bias_scale, f"{role}.in")
        self.output_calibrator = CalibratorBlock(l_out, n_vars, rng, hidden_bias_scale, f"{role}.out")
        self.last_losses: list[float] = []
        self.n_updates = 0

    def params(self) -> list[Param]:
        return self.input_calibrator.params() + self.output_calibrator.params()

    def checksum(self) -> str:
        return checksum(p.value for p in self.params())

    def forward(self, f: SourceForecaster, x_values, x_mask, q_mask) -> np.ndarray:
        return self._forward(f, x_values, x_mask, q_mask)[0]

    def _forward(self, f, x_values, x_mask, q_mask):
        cin, in_cache = self.input_calibrator.forward(x_values)
        raw = f.predict(cin, x_mask, q_mask)
        out, out_cache = self.output_calibrator.forward(raw)
        return out, (cin, in_cache, out_cache)

    def loss_and_grad(self, f: SourceForecaster, batch: MaskedBatch, loss_norm: str = "per_obs",
                      train_input: bool = True) -> float:
        """Adaptation loss on ``batch``; accumulates gradients into the expert's params."""
        pred, (cin, in_cache, out_cache) = self._forward(f, batch.x_values, batch.x_mask, batch.q_mask)
        mask = batch.q_mask
        diff = (pred - batch.y_values) * mask
        per = np.sum(diff * diff, axis=(1, 2))
        n_obs = mask.sum(axis=(1, 2))
        if loss_norm == "per_obs":
            keep = n_obs > 0
            weight = np.where(keep, 1.0 / np.where(keep, n_obs, 1.0), 0.0) / max(int(keep.sum()), 1)
        elif loss_norm == "raw":
            weight = np.full(len(batch), 1.0 / len(batch))
        else:
            raise ValueError(f"loss_norm must be one of {LOSS_NORMS}")
        loss = float(np.sum(per * weight))
        if not np.isfinite(loss):
            return loss
        dpred = 2.0 * diff * weight[:, None, None]
        draw = self.output_calibrator.backward(out_cache, dpred)
        if train_input and f.differentiable:
            dcin = f.input_grad(cin, batch.x_mask, batch.q_mask, draw)
            self.input_calibrator.backward(in_cache, dcin)
        return loss

    def adapt(self, f: SourceForecaster, batch: MaskedBatch, n_steps: int = 5,
              loss_norm: str = "per_obs", input_cali: str = "full_grad") -> float | None:
        """Run ``n_steps`` full-batch Adam steps; returns the loss after the last step.

        A non-finite loss rolls every parameter back to its state before the call.
        """
        if len(batch) == 0:
            raise ValueError("empty adaptation subset")
        if not batch.has_targets:
            raise ValueError("adaptation needs targets")
        if input_cali not in INPUT_CALI:
            raise ValueError(f"input_cali must be one of {INPUT_CALI}")
        self.last_losses = []
        if n_steps <= 0:
            return None
        train_input = input_cali == "full_grad" and f.differentiable
        params = self.params() if train_input else self.output_calibrator.params()
        snaps = snapshot(self.params())
        zero_grads(self.params())
        for _ in range(n_steps):
            loss = self.loss_and_grad(f, batch, loss_norm, train_input)
            if not np.isfinite(loss):
                log.warning("%s expert: non-finite loss, adaptation rolled back", self.role)
                restore(self.params(), snaps)
                return None
            self.last_losses.append(loss)
            adam_step(params, self.lr)
        zero_grads(self.params())
        self.n_updates += 1
        pred = self.forward(f, batch.x_values, batch.x_mask, batch.q_mask)
        return _loss_value(pred, batch, loss_norm)

    def save(self, path, grid_dims):
        meta = {"role": self.role, "lr": self.lr, "grid": list(grid_dims)}
        save_checkpoint(path, {p.name: p.value for p in self.params()}, meta)

    def load(self, path):
        tensors, meta = load_checkpoint(path)
        if meta.get("role") != self.role:
            raise ValueError(f"{path}: role {meta.get('role')!r} != {self.role!r}")
        load_into(self.params(), tensors)


def _loss_value(pred, batch, loss_norm):
    mask = batch.q_mask
    diff = (pred - batch.y_values) * mask
    per = np.sum(diff * diff, axis=(1, 2))
    if loss_norm == "raw":
        return float(per.mean())
    n = mask.sum(axis=(1, 2))
    keep = n > 0
    return float(np.mean(per[keep] / n[keep])) if keep.any() else 0.0


def expert_forward(e: Expert, f: SourceForecaster, x_values, x_mask, q_mask):
    return e.forward(f, x_values, x_mask, q_mask)


def expert_adapt(e: Expert, batch: MaskedBatch, f: SourceForecaster, n_steps: int = 5, **kw):
    return e.adapt(f, batch, n_steps, **kw)
