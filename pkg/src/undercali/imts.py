"""Irregular multivariate time series: samples, canonical grids, file I/O, masked metrics.

In memory a missing cell is value 0 with mask 0; on disk it is JSON ``null``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed or structurally inconsistent sample data."""


class GridConfigError(ValueError):
    """An observation does not fit the configured grid window."""


@dataclass(frozen=True)
class ImtsSample:
    timestamps: np.ndarray  # (L,)
    values: np.ndarray  # (L, C), 0 where unobserved
    mask: np.ndarray  # (L, C), 1.0 where observed
    split_time: float

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.mask, dtype=np.float64)
        if t.ndim != 1 or v.ndim != 2 or v.shape != m.shape or v.shape[0] != t.shape[0]:
            raise DataError(
                f"shape mismatch: timestamps {t.shape}, values {v.shape}, mask {m.shape}"
            )
        if t.size == 0:
            raise DataError("sample has no timestamps")
        if np.any(np.diff(t) <= 0):
            raise DataError("timestamps not increasing")
        if not np.all((m == 0) | (m == 1)):
            raise DataError("mask must be binary")
        if np.any(m.sum(axis=1) == 0):
            raise DataError("every row needs at least one observed cell")
        if np.any(v[m == 0] != 0):
            raise DataError("unobserved cells must hold 0")
        if not np.all(np.isfinite(v)):
            raise DataError("non-finite observed value")
        if not (t[0] <= self.split_time <= t[-1]):
            raise DataError(f"split_time {self.split_time} outside [{t[0]}, {t[-1]}]")
        for arr in (t, v, m):
            arr.flags.writeable = False
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "split_time", float(self.split_time))

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    def channel_times(self, c: int) -> np.ndarray:
        """Observation times of one variable."""
        return self.timestamps[self.mask[:, c] == 1]

    def to_record(self) -> dict:
        rows = [
            [float(x) if ok else None for x, ok in zip(vrow, mrow)]
            for vrow, mrow in zip(self.values, self.mask)
        ]
        return {"t": [float(x) for x in self.timestamps], "v": rows, "split": self.split_time}

    @classmethod
    def from_record(cls, rec: dict) -> "ImtsSample":
        try:
            t = rec["t"]
            raw = rec["v"]
            split = rec["split"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"missing field {exc}") from None
        if len(raw) != len(t):
            raise DataError(f"shape mismatch: {len(t)} timestamps but {len(raw)} value rows")
        widths = {len(r) for r in raw}
        if len(widths) > 1:
            raise DataError("shape mismatch: ragged value rows")
        n = widths.pop() if widths else 0
        values = np.zeros((len(raw), n))
        mask = np.zeros((len(raw), n))
        for i, row in enumerate(raw):
            for c, x in enumerate(row):
                if x is not None:
                    values[i, c] = x
                    mask[i, c] = 1.0
        return cls(np.asarray(t, dtype=np.float64), values, mask, split)


@dataclass(frozen=True)
class WindowPair:
    """A sample cut at its split time into observed history and forecast query."""

    lookback: ImtsSample
    query_times: np.ndarray
    query_mask: np.ndarray
    targets: np.ndarray | None = None


def split_sample(sample: ImtsSample) -> WindowPair:
    t = sample.timestamps
    past = t <= sample.split_time
    lookback = ImtsSample(t[past], sample.values[past], sample.mask[past], sample.split_time)
    fut = ~past
    return WindowPair(lookback, t[fut].copy(), sample.mask[fut].copy(), sample.values[fut].copy())


@dataclass(frozen=True)
class GridSpec:
    """Fixed canonical grid anchored at each sample's split time.

    Lookback slots tile ``[split - lookback, split]`` and forecast slots tile
    ``(split, split + horizon]``, each with uniform width.
    """

    l_in: int
    l_out: int
    n_vars: int
    lookback: float
    horizon: float

    def __post_init__(self):
        if min(self.l_in, self.l_out, self.n_vars) < 1:
            raise GridConfigError("grid dimensions must be positive")
        if self.lookback <= 0 or self.horizon <= 0:
            raise GridConfigError("lookback and horizon spans must be positive")

    @property
    def in_width(self) -> float:
        return self.lookback / self.l_in

    @property
    def out_width(self) -> float:
        return self.horizon / self.l_out


@dataclass(frozen=True)
class GriddedWindow:
    values: np.ndarray  # (L, C)
    mask: np.ndarray  # (L, C)
    slot_times: np.ndarray  # (L,)

    @property
    def grid_len(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]


def _bucket(values, mask, idx, n_slots):
    n_vars = values.shape[1]
    total = np.zeros((n_slots, n_vars))
    count = np.zeros((n_slots, n_vars))
    np.add.at(total, idx, values * mask)
    np.add.at(count, idx, mask)
    out = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return out, (count > 0).astype(np.float64)


def to_grid(sample: ImtsSample, grid: GridSpec) -> tuple[GriddedWindow, GriddedWindow, GriddedWindow]:
    """Bucketize a sample into (lookback, query, target) windows.

    Several observations landing in one slot are averaged.
    """
    if sample.n_vars != grid.n_vars:
        raise GridConfigError(f"sample has {sample.n_vars} variables, grid expects {grid.n_vars}")
    t = sample.timestamps
    split = sample.split_time
    start, end = split - grid.lookback, split + grid.horizon
    # small slack absorbs rounding in start/end arithmetic
    tol = 1e-9 * max(1.0, abs(start), abs(end))
    if t[0] < start - tol or t[-1] > end + tol:
        raise GridConfigError(
            f"observation outside window [{start}, {end}]: times span [{t[0]}, {t[-1]}]"
        )
    past = t <= split
    w_in, w_out = grid.in_width, grid.out_width
    idx_in = np.clip(np.floor((t[past] - start) / w_in).astype(int), 0, grid.l_in - 1)
    idx_out = np.clip(np.ceil((t[~past] - split) / w_out).astype(int) - 1, 0, grid.l_out - 1)

    xv, xm = _bucket(sample.values[past], sample.mask[past], idx_in, grid.l_in)
    yv, ym = _bucket(sample.values[~past], sample.mask[~past], idx_out, grid.l_out)
    in_times = start + w_in * (np.arange(grid.l_in) + 0.5)
    out_times = split + w_out * (np.arange(grid.l_out) + 0.5)
    lookback = GriddedWindow(xv, xm, in_times)
    query = GriddedWindow(np.zeros_like(yv), ym, out_times)
    target = GriddedWindow(yv, ym, out_times)
    return lookback, query, target


@dataclass
class MaskedBatch:
    """Stacked gridded windows; arrays are (B, L, C)."""

    x_values: np.ndarray
    x_mask: np.ndarray
    q_mask: np.ndarray
    y_values: np.ndarray | None = None
    index: np.ndarray = field(default=None)  # position of each sample in the source stream

    def __post_init__(self):
        b = self.x_values.shape[0]
        if self.x_mask.shape != self.x_values.shape:
            raise DataError("lookback values/mask shape mismatch")
        if self.q_mask.shape[0] != b:
            raise DataError("query batch size mismatch")
        if self.y_values is not None and self.y_values.shape != self.q_mask.shape:
            raise DataError("target/query shape mismatch")
        if self.index is None:
            self.index = np.arange(b)

    def __len__(self) -> int:
        return self.x_values.shape[0]

    @property
    def has_targets(self) -> bool:
        return self.y_values is not None

    def subset(self, idx) -> "MaskedBatch":
        idx = np.asarray(idx, dtype=int)
        return MaskedBatch(
            self.x_values[idx],
            self.x_mask[idx],
            self.q_mask[idx],
            None if self.y_values is None else self.y_values[idx],
            self.index[idx],
        )

    def without_targets(self) -> "MaskedBatch":
        return MaskedBatch(self.x_values, self.x_mask, self.q_mask, None, self.index)

    @classmethod
    def from_windows(cls, inputs: Sequence[GriddedWindow], queries: Sequence[GriddedWindow],
                     targets: Sequence[GriddedWindow] | None = None, index=None) -> "MaskedBatch":
        if len(inputs) != len(queries) or (targets is not None and len(targets) != len(inputs)):
            raise DataError("inputs, queries and targets must have equal length")
        if not inputs:
            raise DataError("empty batch")
        try:
            xv = np.stack([w.values for w in inputs])
            xm = np.stack([w.mask for w in inputs])
            qm = np.stack([w.mask for w in queries])
            yv = None if targets is None else np.stack([w.values for w in targets])
        except ValueError as exc:
            raise DataError(f"inhomogeneous window shapes: {exc}") from None
        return cls(xv, xm, qm, yv, None if index is None else np.asarray(index))

    @classmethod
    def from_samples(cls, samples: Sequence[ImtsSample], grid: GridSpec, index=None) -> "MaskedBatch":
        wins = [to_grid(s, grid) for s in samples]
        return cls.from_windows([w[0] for w in wins], [w[1] for w in wins], [w[2] for w in wins], index)


def iter_batches(data: MaskedBatch, batch_size: int) -> Iterator[MaskedBatch]:
    """Consecutive batches in stream order; the last one may be short."""
    for lo in range(0, len(data), batch_size):
        yield data.subset(np.arange(lo, min(lo + batch_size, len(data))))


# --- file I/O -----------------------------------------------------------------

def load_jsonl(path: str | Path, grid: GridSpec | None = None) -> Iterator[ImtsSample]:
    """Yield samples in file order.

    When ``grid`` is given each sample's variable count is checked against it.
    """
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: parse error: {exc.msg}") from None
            try:
                sample = ImtsSample.from_record(rec)
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            if grid is not None and sample.n_vars != grid.n_vars:
                raise DataError(f"line {lineno}: expected {grid.n_vars} variables, got {sample.n_vars}")
            yield sample


def dump_jsonl(samples: Iterable[ImtsSample], path: str | Path) -> int:
    n = 0
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


# --- metrics ------------------------------------------------------------------

def masked_sq_norm(pred, target, mask) -> float:
    """Unnormalized squared error over observed cells (sum, not mean)."""
    diff = (np.asarray(pred) - np.asarray(target)) * mask
    return float(np.sum(diff * diff))


def masked_mse(pred, target, mask) -> float:
    n = float(np.sum(mask))
    if n == 0:
        raise ValueError("empty target")
    return masked_sq_norm(pred, target, mask) / n


def masked_mae(pred, target, mask) -> float:
    n = float(np.sum(mask))
    if n == 0:
        raise ValueError("empty target")
    return float(np.sum(np.abs((np.asarray(pred) - np.asarray(target)) * mask))) / n


def per_sample_sq_norm(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise masked squared norm over a (B, L, C) batch."""
    diff = (pred - target) * mask
    return np.sum(diff * diff, axis=tuple(range(1, diff.ndim)))


def checksum(arrays: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


__all__ = [
    "DataError", "GridConfigError", "ImtsSample", "WindowPair", "split_sample", "GridSpec",
    "GriddedWindow", "to_grid", "MaskedBatch", "iter_batches", "load_jsonl", "dump_jsonl",
    "masked_sq_norm", "masked_mse", "masked_mae", "per_sample_sq_norm", "checksum",
    "split_stream",
]


def split_stream(n: int, train_frac: float = 0.2, valid_frac: float = 0.05,
                 seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index split into (train, valid, online).

    The leading ``train_frac + valid_frac`` of the stream is shuffled and cut
    into train/valid; the remainder keeps its original order for online use.
    """
    if not (0 < train_frac and 0 <= valid_frac and train_frac + valid_frac < 1):
        raise ValueError("need 0 < train_frac, 0 <= valid_frac, train_frac + valid_frac < 1")
    n_train = int(round(n * train_frac))
    n_valid = int(round(n * valid_frac))
    head = np.random.Generator(np.random.Philox(seed)).permutation(n_train + n_valid)
    return np.sort(head[:n_train]), np.sort(head[n_train:]), np.arange(n_train + n_valid, n)
