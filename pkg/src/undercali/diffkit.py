"""Small dense-network kernel with hand-written backprop, Adam, and a finite-difference checker.

All arrays are float64.  Layers accept inputs with arbitrary leading batch
dimensions ``(..., in_features)``; parameter gradients are summed over them.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT = "undercali-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    """Backward called without a matching forward cache."""


class NonFiniteGradient(FloatingPointError):
    pass


class Param:
    """A trainable tensor with its gradient accumulator and Adam moments."""

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def snapshot(self):
        return (self.value.copy(), self.adam_m.copy(), self.adam_v.copy(), self.step_count)

    def restore(self, snap):
        self.value[...], self.adam_m[...], self.adam_v[...], self.step_count = snap
        self.zero_grad()

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


_ACTIVATIONS = ("tanh", "relu", "linear")


class Dense:
    """y = act(x @ W.T + b)."""

    def __init__(self, weight, bias, activation: str = "linear", name: str = "dense"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"weight {weight.shape} / bias {bias.shape} do not chain")
        self.W = Param(weight, f"{name}.W")
        self.b = Param(bias, f"{name}.b")
        self.activation = activation

    @property
    def in_features(self) -> int:
        return self.W.value.shape[1]

    @property
    def out_features(self) -> int:
        return self.W.value.shape[0]

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"input width {x.shape[-1]} != {self.in_features}")
        z = x @ self.W.value.T + self.b.value
        if self.activation == "tanh":
            a = np.tanh(z)
        elif self.activation == "relu":
            a = np.maximum(z, 0.0)
        else:
            a = z
        return a, (x, z, a)

    def backward(self, cache, da):
        x, z, a = cache
        if self.activation == "tanh":
            dz = da * (1.0 - a * a)
        elif self.activation == "relu":
            dz = da * (z > 0)
        else:
            dz = da
        dz2 = dz.reshape(-1, dz.shape[-1])
        self.W.grad += dz2.T @ x.reshape(-1, x.shape[-1])
        self.b.grad += dz2.sum(axis=0)
        return dz @ self.W.value

    def params(self) -> list[Param]:
        return [self.W, self.b]


class Mlp:
    def __init__(self, layers: Sequence[Dense]):
        for a, b in zip(layers, layers[1:]):
            if a.out_features != b.in_features:
                raise ShapeError(f"layer widths do not chain: {a.out_features} -> {b.in_features}")
        self.layers = list(layers)

    @classmethod
    def build(cls, widths: Sequence[int], rng: np.random.Generator, hidden: str = "tanh",
              zero_last: bool = False, hidden_bias_scale: float = 0.0, name: str = "mlp") -> "Mlp":
        """Glorot-uniform hidden weights; linear output layer.

        ``hidden_bias_scale`` > 0 draws hidden biases from U(-s/sqrt(fan_in), s/sqrt(fan_in)).
        ``zero_last`` zeroes the output layer's weight and bias.
        """
        layers = []
        n = len(widths) - 1
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == n - 1
            if last and zero_last:
                w, b = np.zeros((fo, fi)), np.zeros(fo)
            else:
                w = glorot_uniform(rng, fi, fo)
                if not last and hidden_bias_scale > 0:
                    lim = hidden_bias_scale / np.sqrt(fi)
                    b = rng.uniform(-lim, lim, size=fo)
                else:
                    b = np.zeros(fo)
            layers.append(Dense(w, b, "linear" if last else hidden, f"{name}.{i}"))
        return cls(layers)

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dy):
        if cache is None or len(cache) != len(self.layers):
            raise BackwardError("backward requires the cache from a matching forward call")
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            dy = layer.backward(c, dy)
        return dy

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]


def mlp_forward(mlp: Mlp, x):
    return mlp.forward(x)


def mlp_backward(mlp: Mlp, cache, upstream):
    return mlp.backward(cache, upstream)


def zero_grads(params: Iterable[Param]):
    for p in params:
        p.zero_grad()


def adam_step(params: Iterable[Param], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {p.name or 'parameter'}")
    for p in params:
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (p.grad * p.grad)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def snapshot(params: Iterable[Param]):
    return [p.snapshot() for p in params]


def restore(params: Iterable[Param], snaps):
    for p, s in zip(params, snaps):
        p.restore(s)


def grad_check(loss_and_grad: Callable[[], float], params: Sequence[Param], h: float = 1e-5,
               floor: float = 1e-3) -> float:
    """Worst relative error of analytic gradients against central differences.

    ``loss_and_grad()`` must return the scalar loss and accumulate analytic
    gradients into ``p.grad``.  The error for each coordinate is
    ``|g - g_fd| / max(|g|, |g_fd|, floor)``; ``floor`` keeps coordinates whose
    true gradient is ~0 from amplifying rounding noise.
    """
    return grad_check_worst(loss_and_grad, params, h, floor)[0]


def grad_check_worst(loss_and_grad, params, h=1e-5, floor=1e-3) -> tuple[float, str, tuple]:
    """Like :func:`grad_check` but also names the worst parameter and its index."""
    zero_grads(params)
    loss_and_grad()
    analytic = [p.grad.copy() for p in params]
    worst, where = 0.0, ("", ())
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_and_grad()
            flat[i] = orig - h
            fm = loss_and_grad()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            if err > worst or not where[0]:
                worst, where = err, (p.name, np.unravel_index(i, p.shape))
    zero_grads(params)
    return worst, where[0], tuple(int(k) for k in where[1])


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    """Write named float64 tensors as JSON.

    Layout: ``{"format", "version", "meta", "tensors": {name: {"shape", "data"}}}``
    with ``data`` flattened row-major.  Python's shortest-repr float encoding
    round-trips float64 exactly.
    """
    body = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {
            k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in tensors.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(body, fh, allow_nan=False, sort_keys=True)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        body = json.load(fh)
    if body.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if body.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {body.get('version')}")
    tensors = {}
    for k, t in body["tensors"].items():
        arr = np.asarray(t["data"], dtype=np.float64)
        shape = tuple(t["shape"])
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{path}: tensor {k} has {arr.size} values for shape {shape}")
        tensors[k] = arr.reshape(shape)
    return tensors, body.get("meta", {})


def named_tensors(params: Iterable[Param]) -> dict[str, np.ndarray]:
    return {p.name: p.value for p in params}


def load_into(params: Iterable[Param], tensors: dict[str, np.ndarray]):
    for p in params:
        if p.name not in tensors:
            raise KeyError(f"checkpoint lacks tensor {p.name}")
        if tensors[p.name].shape != p.value.shape:
            raise ShapeError(f"{p.name}: checkpoint shape {tensors[p.name].shape} != {p.value.shape}")
        p.value[...] = tensors[p.name]
