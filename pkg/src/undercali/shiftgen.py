"""Synthetic irregular streams with regime shifts in level, dynamics, noise and missingness.

Randomness comes from numpy's Philox4x64-10 counter-based bit generator keyed
by the scenario seed, so a seed fixes the stream on every platform.

Each sample is an independent AR(1) path per variable, sampled at
``substeps`` jittered instants per grid slot over ``[0, lookback + horizon]``
and thinned cell-by-cell with the regime's missing rate.  The split sits at
``t = lookback``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .imts import GridSpec, ImtsSample


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Regime:
    start: float  # fraction of the stream where this regime begins
    mean_offset: tuple[float, ...] | float = 0.0
    ar: float = 0.6
    noise: float = 1.0
    missing: float = 0.3

    def offsets(self, n_vars: int) -> np.ndarray:
        off = np.broadcast_to(np.asarray(self.mean_offset, dtype=np.float64), (n_vars,))
        return off.copy()

    @property
    def stationary_std(self) -> float:
        return self.noise / np.sqrt(1.0 - self.ar ** 2)


@dataclass(frozen=True)
class ShiftScenario:
    n_vars: int
    n_samples: int
    grid: GridSpec
    regimes: Sequence[Regime] = field(default_factory=lambda: (Regime(0.0),))
    seed: int = 0
    substeps: int = 2

    def __post_init__(self):
        if self.n_vars != self.grid.n_vars:
            raise ScenarioError(f"n_vars {self.n_vars} != grid.n_vars {self.grid.n_vars}")
        if self.n_samples < 1 or self.substeps < 1:
            raise ScenarioError("n_samples and substeps must be positive")
        if not self.regimes:
            raise ScenarioError("at least one regime required")
        starts = [r.start for r in self.regimes]
        if starts[0] != 0.0:
            raise ScenarioError("first regime must start at 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ScenarioError("regime start fractions must be strictly increasing")
        for r in self.regimes:
            if not 0.0 <= r.missing < 1.0:
                raise ScenarioError(f"missing rate {r.missing} outside [0, 1)")
            if not abs(r.ar) < 1.0:
                raise ScenarioError(f"AR coefficient {r.ar} must satisfy |a| < 1")
            if r.noise < 0:
                raise ScenarioError("noise scale must be non-negative")
            np.broadcast_to(np.asarray(r.mean_offset, dtype=np.float64), (self.n_vars,))

    def regime_at(self, i: int) -> Regime:
        frac = i / self.n_samples
        active = self.regimes[0]
        for r in self.regimes:
            if r.start <= frac:
                active = r
        return active


def _sample(rng: np.random.Generator, sc: ShiftScenario, reg: Regime) -> ImtsSample:
    g = sc.grid
    C = sc.n_vars
    n_in, n_out = g.l_in * sc.substeps, g.l_out * sc.substeps
    dt_in, dt_out = g.lookback / n_in, g.horizon / n_out
    # jitter strictly inside each sub-interval keeps times increasing and on the correct side of the split
    jit = rng.uniform(0.05, 0.95, size=n_in + n_out)
    t = np.concatenate([(np.arange(n_in) + jit[:n_in]) * dt_in,
                        g.lookback + (np.arange(n_out) + jit[n_in:]) * dt_out])

    mu = reg.offsets(C)
    z = rng.standard_normal((n_in + n_out, C))
    x = np.empty((n_in + n_out, C))
    x[0] = mu + reg.stationary_std * z[0]
    for j in range(1, n_in + n_out):
        x[j] = mu + reg.ar * (x[j - 1] - mu) + reg.noise * z[j]

    keep = rng.uniform(size=x.shape) >= reg.missing
    # at least one observation on each side of the split
    for lo, hi in ((0, n_in), (n_in, n_in + n_out)):
        if not keep[lo:hi].any():
            keep[rng.integers(lo, hi), rng.integers(C)] = True
    rows = keep.any(axis=1)
    mask = keep[rows].astype(np.float64)
    return ImtsSample(t[rows], x[rows] * mask, mask, g.lookback)


def generate(scenario: ShiftScenario) -> Iterator[ImtsSample]:
    rng = np.random.Generator(np.random.Philox(scenario.seed))
    for i in range(scenario.n_samples):
        yield _sample(rng, scenario, scenario.regime_at(i))


def mean_shift_scenario(grid: GridSpec, n_samples: int = 600, shift_at: float = 0.5,
                        shift_sigmas: float = 2.0, missing=(0.3, 0.5), ar: float = 0.6,
                        noise: float = 1.0, seed: int = 0, substeps: int = 2) -> ShiftScenario:
    """Two regimes: an abrupt level jump of ``shift_sigmas`` stationary std plus a missing-rate change."""
    base = Regime(0.0, 0.0, ar, noise, missing[0])
    shifted = Regime(shift_at, shift_sigmas * base.stationary_std, ar, noise, missing[1])
    return ShiftScenario(grid.n_vars, n_samples, grid, (base, shifted), seed, substeps)
