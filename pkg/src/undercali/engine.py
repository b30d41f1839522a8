"""Online inference/adaptation loop and its ablation modes.

Per batch, the inference stage runs before any ground truth is touched:
every sample is calibrated by the reliable expert, scored by the uncertainty
estimator, and samples scoring at or above the allocation threshold are
recalibrated by the unreliable expert.  Metrics are taken on those
predictions.  Only then does the adaptation stage look at the targets.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .arm import ArmState, batch_moments, route
from .forecaster import SourceForecaster
from .gdc import INPUT_CALI, LOSS_NORMS, Expert
from .imts import MaskedBatch, iter_batches
from .uncertainty import RANGE_MODES, UncertaintyEstimator

log = logging.getLogger(__name__)

MODES = (
    "full",
    "single_expert_joint",
    "single_expert_reliable",
    "single_expert_unreliable",
    "random_triggering",
    "random_allocating",
    "no_ue_single_joint",
    "frozen",
)
ABLATION_MODES = MODES[:7]
UE_TARGETS = ("post_update", "pre_update")

CSV_COLUMNS = (
    "batch_index", "n_samples", "mse", "mae", "mean_uncertainty", "triggered", "n_reliable",
    "n_unreliable", "n_obs", "var_uncertainty", "mu_alloc", "sigma_alloc", "tau_alloc",
    "mu_trig", "sigma_trig", "tau_trig",
)


class EngineConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    mode: str = "full"
    batch_size: int = 8
    inner_steps: int = 5
    ue_steps: int = 5
    lr_reliable: float = 5e-2
    lr_unreliable: float = 5e-3
    lr_ue: float = 1e-3
    alpha_alloc: float = 0.75
    kappa_alloc: float = 0.25
    alpha_trig: float = 0.25
    kappa_trig: float = 0.75
    p_trigger: float = 0.85
    seed: int = 0
    loss_norm: str = "per_obs"
    input_cali: str = "full_grad"
    range_mode: str = "expanding"
    ue_target: str = "post_update"
    hidden_bias_scale: float = 1.0
    noise_var: float = 0.0
    noise_batches: tuple = ()
    # batches (0-based) whose adaptation stage is skipped; used by the causality audit
    no_adapt_batches: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise EngineConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if not 0.0 <= self.p_trigger <= 1.0:
            raise EngineConfigError("p_trigger must lie in [0, 1]")
        if self.batch_size < 1 or self.inner_steps < 0 or self.ue_steps < 0:
            raise EngineConfigError("batch_size must be positive and step counts non-negative")
        for name, val, allowed in (("loss_norm", self.loss_norm, LOSS_NORMS),
                                   ("input_cali", self.input_cali, INPUT_CALI),
                                   ("range_mode", self.range_mode, RANGE_MODES),
                                   ("ue_target", self.ue_target, UE_TARGETS)):
            if val not in allowed:
                raise EngineConfigError(f"{name} must be one of {allowed}, got {val!r}")
        if self.noise_var < 0:
            raise EngineConfigError("noise_var must be non-negative")

    @property
    def uses_ue(self) -> bool:
        return self.mode != "no_ue_single_joint"


@dataclass
class BatchOutcome:
    batch_index: int
    predictions: np.ndarray
    scores: np.ndarray
    reliable: np.ndarray
    unreliable: np.ndarray
    triggered: bool
    n_obs: float
    sse: float
    sae: float
    telemetry: dict = field(default_factory=dict)

    @property
    def mse(self) -> float:
        return self.sse / self.n_obs if self.n_obs else math.nan

    @property
    def mae(self) -> float:
        return self.sae / self.n_obs if self.n_obs else math.nan

    def row(self) -> dict:
        if self.scores.size and np.all(np.isfinite(self.scores)):
            mean_u, var_u = batch_moments(self.scores)
        else:
            mean_u = var_u = math.nan
        r = {
            "batch_index": self.batch_index,
            "n_samples": len(self.predictions),
            "mse": self.mse,
            "mae": self.mae,
            "mean_uncertainty": mean_u,
            "triggered": int(self.triggered),
            "n_reliable": len(self.reliable),
            "n_unreliable": len(self.unreliable),
            "n_obs": int(self.n_obs),
            "var_uncertainty": var_u,
        }
        for k in CSV_COLUMNS[10:]:
            r[k] = self.telemetry.get(k, math.nan)
        return r


class OnlineEngine:
    """Owns the experts, a private copy of the estimator, and the routing state."""

    def __init__(self, cfg: EngineConfig, f: SourceForecaster, ue: UncertaintyEstimator | None):
        if cfg.uses_ue and ue is None:
            raise EngineConfigError(f"mode {cfg.mode} needs an uncertainty estimator")
        self.cfg = cfg
        self.f = f
        self.ue = copy.deepcopy(ue) if ue is not None else None
        if self.ue is not None:
            self.ue.lr = cfg.lr_ue
            self.ue.range_mode = cfg.range_mode
        g = f.grid
        init_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0])))
        self.reliable = Expert(g.l_in, g.l_out, g.n_vars, cfg.lr_reliable, init_rng, "reliable",
                               cfg.hidden_bias_scale)
        self.unreliable = Expert(g.l_in, g.l_out, g.n_vars, cfg.lr_unreliable, init_rng, "unreliable",
                                 cfg.hidden_bias_scale)
        self.decision_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 1])))
        self.noise_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 2])))
        self.arm = ArmState(cfg.alpha_alloc, cfg.kappa_alloc, cfg.alpha_trig, cfg.kappa_trig)
        self.t = 0

    # -- inference stage ---------------------------------------------------------

    def _raw(self, b: MaskedBatch):
        return self.f.predict(b.x_values, b.x_mask, b.q_mask)

    def infer(self, batch: MaskedBatch):
        """Predictions, scores and routing for a batch; never reads targets."""
        cfg = self.cfg
        mode = cfg.mode
        n = len(batch)
        inputs = batch.without_targets()
        if mode == "single_expert_unreliable":
            prelim = self._raw(inputs)
        else:
            prelim = self.reliable.forward(self.f, inputs.x_values, inputs.x_mask, inputs.q_mask)

        if not cfg.uses_ue:
            return prelim, np.full(n, math.nan), np.arange(n), np.arange(0)

        scores = self.ue.estimate(inputs.x_values, inputs.x_mask, prelim, inputs.q_mask)
        if cfg.noise_var > 0 and self.t in cfg.noise_batches:
            noise = self.noise_rng.normal(0.0, math.sqrt(cfg.noise_var), size=n)
            scores = np.clip(scores + noise, 0.0, 1.0)
        tau = self.arm.allocation_threshold(scores)
        if mode == "random_allocating":
            coin = self.decision_rng.uniform(size=n) < 0.5
            rel, unrel = np.flatnonzero(coin), np.flatnonzero(~coin)
        else:
            rel, unrel = route(scores, tau)

        final = prelim.copy()
        if mode == "single_expert_joint":
            return final, scores, rel, unrel
        if len(unrel):
            sub = inputs.subset(unrel)
            if mode == "single_expert_reliable":
                final[unrel] = self._raw(sub)
            else:
                final[unrel] = self.unreliable.forward(self.f, sub.x_values, sub.x_mask, sub.q_mask)
        return final, scores, rel, unrel

    # -- adaptation stage --------------------------------------------------------

    def _decide(self, scores) -> bool:
        cfg = self.cfg
        if not cfg.uses_ue:
            return True
        decision = self.arm.trigger_decision(scores)
        if cfg.mode == "frozen":
            return False
        if cfg.mode == "random_triggering":
            return bool(self.decision_rng.uniform() < cfg.p_trigger)
        return decision

    def adapt(self, batch: MaskedBatch, prelim_rel_pred, rel, unrel):
        cfg = self.cfg
        mode = cfg.mode
        kw = dict(loss_norm=cfg.loss_norm, input_cali=cfg.input_cali)
        if mode in ("single_expert_joint", "no_ue_single_joint"):
            self.reliable.adapt(self.f, batch, cfg.inner_steps, **kw)
        else:
            if len(rel) and mode != "single_expert_unreliable":
                self.reliable.adapt(self.f, batch.subset(rel), cfg.inner_steps, **kw)
            if len(unrel) and mode != "single_expert_reliable":
                self.unreliable.adapt(self.f, batch.subset(unrel), cfg.inner_steps, **kw)
        if cfg.uses_ue and len(rel):
            sub = batch.subset(rel)
            if mode == "single_expert_unreliable":
                pred = self._raw(sub)
            elif cfg.ue_target == "post_update":
                pred = self.reliable.forward(self.f, sub.x_values, sub.x_mask, sub.q_mask)
            else:
                pred = prelim_rel_pred
            self.ue.update_online(sub, pred, cfg.ue_steps)

    def process_batch(self, batch: MaskedBatch) -> BatchOutcome:
        final, scores, rel, unrel = self.infer(batch)
        # reliable samples keep their preliminary prediction
        prelim_rel = final[rel]
        n_obs = sse = sae = 0.0
        if batch.has_targets:
            diff = (final - batch.y_values) * batch.q_mask
            n_obs = float(batch.q_mask.sum())
            sse = float(np.sum(diff * diff))
            sae = float(np.sum(np.abs(diff)))

        triggered = self._decide(scores)
        if self.t in self.cfg.no_adapt_batches:
            triggered = False
        if triggered:
            if n_obs > 0:
                self.adapt(batch, prelim_rel, rel, unrel)
            else:
                log.info("batch %d: no observed targets, adaptation skipped", self.t)
        if self.cfg.uses_ue:
            self.arm.trigger_stats_commit(scores)
        out = BatchOutcome(self.t, final, scores, rel, unrel, triggered, n_obs, sse, sae,
                           self.arm.telemetry() if self.cfg.uses_ue else {})
        self.t += 1
        return out


@dataclass
class RunReport:
    mode: str
    seed: int
    outcomes: list

    @property
    def n_batches(self) -> int:
        return len(self.outcomes)

    @property
    def mse(self) -> float:
        return sum(o.sse for o in self.outcomes) / sum(o.n_obs for o in self.outcomes)

    @property
    def mae(self) -> float:
        return sum(o.sae for o in self.outcomes) / sum(o.n_obs for o in self.outcomes)

    @property
    def update_frequency(self) -> float:
        return sum(o.triggered for o in self.outcomes) / max(self.n_batches, 1)

    def batch_mse(self) -> np.ndarray:
        return np.array([o.mse for o in self.outcomes])

    def summary(self) -> dict:
        return {"mode": self.mode, "seeds": [self.seed], "mse": self.mse, "mae": self.mae,
                "update_frequency": self.update_frequency, "n_batches": self.n_batches}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for o in self.outcomes:
            w.writerow({k: _fmt(v) for k, v in o.row().items()})
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def run_stream(cfg: EngineConfig, data: MaskedBatch, f: SourceForecaster,
               ue: UncertaintyEstimator | None, engine_cls=None) -> RunReport:
    """Process ``data`` in stream order, ``cfg.batch_size`` samples at a time."""
    engine = (engine_cls or OnlineEngine)(cfg, f, ue)
    outcomes = [engine.process_batch(b) for b in iter_batches(data, cfg.batch_size)]
    return RunReport(cfg.mode, cfg.seed, outcomes)


def aggregate(reports) -> dict:
    """Mean/std over seeds of per-seed summaries."""
    mses = np.array([r.mse for r in reports])
    maes = np.array([r.mae for r in reports])
    freqs = np.array([r.update_frequency for r in reports])
    return {
        "mode": reports[0].mode,
        "seeds": [r.seed for r in reports],
        "mse": float(mses.mean()),
        "mse_std": float(mses.std()),
        "mae": float(maes.mean()),
        "mae_std": float(maes.std()),
        "update_frequency": float(freqs.mean()),
        "n_batches": reports[0].n_batches,
    }


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- protocol checks ---------------------------------------------------------------

@dataclass
class AuditResult:
    passed: bool
    prefix_identical: bool
    same_batch_isolated: bool
    target_blind: bool
    forecaster_unchanged: bool
    checked_batch: int

    def __bool__(self):
        return self.passed


def _same_predictions(xs, ys) -> bool:
    return len(xs) == len(ys) and all(
        np.array_equal(a.predictions, b.predictions) and np.array_equal(a.scores, b.scores, equal_nan=True)
        for a, b in zip(xs, ys)
    )


def causality_audit(cfg: EngineConfig, data: MaskedBatch, f: SourceForecaster,
                    ue: UncertaintyEstimator | None, t: int | None = None, engine_cls=None) -> AuditResult:
    """Check that batch ``t``'s predictions depend on nothing revealed at or after ``t``.

    Four runs: the full stream; the stream truncated after batch ``t``; the
    full stream with adaptation disabled at batch ``t`` only; and the full
    stream with every target from batch ``t`` on replaced by noise.
    Predictions up to ``t`` must match bit-for-bit across the first, second
    and fourth, and batch ``t`` must match across the first and third.
    """
    n_batches = math.ceil(len(data) / cfg.batch_size)
    if t is None:
        t = n_batches // 2
    before = f.checksum()
    full = run_stream(cfg, data, f, ue, engine_cls)
    cut = data.subset(np.arange(min(len(data), (t + 1) * cfg.batch_size)))
    trunc = run_stream(cfg, cut, f, ue, engine_cls)
    held = run_stream(replace(cfg, no_adapt_batches=tuple(cfg.no_adapt_batches) + (t,)), data, f, ue, engine_cls)
    y = data.y_values.copy()
    start = t * cfg.batch_size
    noise = np.random.Generator(np.random.Philox(cfg.seed + 991)).normal(size=y[start:].shape)
    y[start:] = (y[start:] + 10.0 * noise) * data.q_mask[start:]
    scrambled = run_stream(cfg, MaskedBatch(data.x_values, data.x_mask, data.q_mask, y, data.index), f, ue, engine_cls)

    prefix = len(trunc.outcomes) == t + 1 and _same_predictions(full.outcomes[: t + 1], trunc.outcomes)
    a, b = full.outcomes[t], held.outcomes[t]
    isolated = np.array_equal(a.predictions, b.predictions) and a.sse == b.sse and a.sae == b.sae
    blind = _same_predictions(full.outcomes[: t + 1], scrambled.outcomes[: t + 1])
    unchanged = f.checksum() == before
    return AuditResult(prefix and isolated and blind and unchanged, prefix, isolated, blind, unchanged, t)


@dataclass
class NoiseProbeReport:
    noise_var: float
    noise_batch: int
    clean_mse: np.ndarray
    noisy_mse: np.ndarray
    noisy_scores: list

    @property
    def rel_delta(self) -> np.ndarray:
        """Per-batch relative MSE change of the noisy run vs the clean run."""
        return (self.noisy_mse - self.clean_mse) / self.clean_mse

    def after(self, k: int) -> float:
        """Relative delta ``k`` batches after the injected batch."""
        return float(self.rel_delta[self.noise_batch + k])

    def to_dict(self) -> dict:
        return {"noise_var": self.noise_var, "noise_batch": self.noise_batch,
                "clean_mse": self.clean_mse.tolist(), "noisy_mse": self.noisy_mse.tolist(),
                "rel_delta": self.rel_delta.tolist()}


def ue_noise_probe(cfg: EngineConfig, data: MaskedBatch, f: SourceForecaster, ue: UncertaintyEstimator,
                   noise_var: float = 0.5, noise_batch: int = 5, width: int = 1) -> NoiseProbeReport:
    """Inject seeded Gaussian noise into the estimated scores for ``width`` batches."""
    clean = run_stream(replace(cfg, noise_var=0.0, noise_batches=()), data, f, ue)
    noisy_cfg = replace(cfg, noise_var=noise_var, noise_batches=tuple(range(noise_batch, noise_batch + width)))
    noisy = run_stream(noisy_cfg, data, f, ue)
    return NoiseProbeReport(noise_var, noise_batch, clean.batch_mse(), noisy.batch_mse(),
                            [o.scores for o in noisy.outcomes])


def config_dict(cfg: EngineConfig) -> dict:
    d = asdict(cfg)
    d["noise_batches"] = list(cfg.noise_batches)
    d["no_adapt_batches"] = list(cfg.no_adapt_batches)
    return d
