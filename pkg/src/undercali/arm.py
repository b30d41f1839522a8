"""Adaptive routing: EMA-tracked score statistics, allocation and trigger thresholds."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EmaStats:
    alpha: float
    mu: float = 0.0
    var: float = 0.0
    seen_first: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.var)

    def update(self, batch_mean: float, batch_var: float):
        if not (math.isfinite(batch_mean) and math.isfinite(batch_var)):
            raise ValueError("non-finite batch statistics")
        if not self.seen_first:
            self.mu, self.var, self.seen_first = batch_mean, batch_var, True
        else:
            a = self.alpha
            self.mu = (1 - a) * self.mu + a * batch_mean
            self.var = (1 - a) * self.var + a * batch_var


def ema_update(s: EmaStats, batch_mean: float, batch_var: float):
    s.update(batch_mean, batch_var)


def batch_moments(scores) -> tuple[float, float]:
    """Mean and population variance (a singleton batch has variance 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty batch")
    return float(scores.mean()), float(scores.var())


@dataclass
class ArmState:
    alpha_alloc: float = 0.75
    kappa_alloc: float = 0.25
    alpha_trig: float = 0.25
    kappa_trig: float = 0.75
    alloc: EmaStats = field(init=False)
    trig: EmaStats = field(init=False)
    last_alloc_threshold: float = field(init=False, default=math.nan)
    last_trig_threshold: float = field(init=False, default=math.nan)

    def __post_init__(self):
        self.alloc = EmaStats(self.alpha_alloc)
        self.trig = EmaStats(self.alpha_trig)

    def allocation_threshold(self, scores) -> float:
        """Fold the current batch into the allocation stats, then threshold on them."""
        self.alloc.update(*batch_moments(scores))
        self.last_alloc_threshold = self.alloc.mu + self.kappa_alloc * self.alloc.sigma
        return self.last_alloc_threshold

    def trigger_threshold(self) -> float:
        """Threshold from the stats as of the previous batch; NaN before the first batch."""
        if not self.trig.seen_first:
            return math.nan
        return self.trig.mu + self.kappa_trig * self.trig.sigma

    def trigger_decision(self, scores) -> bool:
        mean, _ = batch_moments(scores)
        tau = self.trigger_threshold()
        self.last_trig_threshold = tau
        if math.isnan(tau):
            return True  # no history yet: always adapt on the first batch
        return mean > tau

    def trigger_stats_commit(self, scores):
        self.trig.update(*batch_moments(scores))

    def telemetry(self) -> dict:
        return {
            "mu_alloc": self.alloc.mu,
            "sigma_alloc": self.alloc.sigma,
            "tau_alloc": self.last_alloc_threshold,
            "mu_trig": self.trig.mu,
            "sigma_trig": self.trig.sigma,
            "tau_trig": self.last_trig_threshold,
        }


def allocation_threshold(arm: ArmState, scores) -> float:
    return arm.allocation_threshold(scores)


def trigger_decision(arm: ArmState, scores) -> bool:
    return arm.trigger_decision(scores)


def trigger_stats_commit(arm: ArmState, scores):
    arm.trigger_stats_commit(scores)


def route(scores, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices scoring strictly below ``tau`` are reliable; the rest (ties included) are not."""
    scores = np.asarray(scores)
    reliable = scores < tau
    return np.flatnonzero(reliable), np.flatnonzero(~reliable)


def replay_trigger_count(moments, alpha_trig: float, kappa_trig: float) -> int:
    """Number of triggered batches for a recorded sequence of (batch mean, batch variance)."""
    stats = EmaStats(alpha_trig)
    count = 0
    for mean, var in moments:
        if not stats.seen_first or mean > stats.mu + kappa_trig * stats.sigma:
            count += 1
        stats.update(mean, var)
    return count
