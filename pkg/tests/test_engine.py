import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from undercali.engine import (ABLATION_MODES, CSV_COLUMNS, MODES, EngineConfig, EngineConfigError, OnlineEngine,
                              aggregate, causality_audit, run_stream, ue_noise_probe)
from undercali.imts import iter_batches


class LeakyEngine(OnlineEngine):
    """Negative control: adapts on the batch's targets before predicting it."""

    def process_batch(self, batch):
        if self.t > 0 and batch.has_targets:
            self.reliable.adapt(self.f, batch, 1)
        return super().process_batch(batch)


@pytest.fixture(scope="module")
def prep(small_bench):
    return small_bench


def run(prep, **kw):
    cfg = EngineConfig(**kw)
    return run_stream(cfg, prep.online, prep.f, prep.ue if cfg.uses_ue else None)


def test_first_batch_reproduces_forecaster(prep):
    first = next(iter_batches(prep.online, 8))
    raw = prep.f.predict(first.x_values, first.x_mask, first.q_mask)
    for mode in MODES:
        rep = run(prep, mode=mode)
        assert np.array_equal(rep.outcomes[0].predictions, raw), mode


def test_csv_recomputes_aggregate(prep):
    rep = run(prep, mode="full")
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert list(rows[0]) == list(CSV_COLUMNS)
    sse = sum(float(r["mse"]) * float(r["n_obs"]) for r in rows)
    n = sum(float(r["n_obs"]) for r in rows)
    assert abs(sse / n - rep.mse) < 1e-9
    assert sum(int(r["n_samples"]) for r in rows) == len(prep.online)
    for r in rows:
        assert int(r["n_reliable"]) + int(r["n_unreliable"]) == int(r["n_samples"])


def test_random_triggering_with_zero_probability_equals_frozen(prep):
    a = run(prep, mode="random_triggering", p_trigger=0.0)
    b = run(prep, mode="frozen")
    assert a.update_frequency == 0.0
    assert all(np.array_equal(x.predictions, y.predictions) for x, y in zip(a.outcomes, b.outcomes))


def test_frozen_matches_forecaster(prep):
    rep = run(prep, mode="frozen")
    raw = prep.f.predict(prep.online.x_values, prep.online.x_mask, prep.online.q_mask)
    assert np.array_equal(np.concatenate([o.predictions for o in rep.outcomes]), raw)


@pytest.mark.parametrize("mode", MODES)
def test_runs_are_deterministic(prep, mode):
    assert run(prep, mode=mode, seed=3).to_csv() == run(prep, mode=mode, seed=3).to_csv()


def test_causality_audit_passes(prep):
    for mode in ("full", "random_allocating", "no_ue_single_joint"):
        res = causality_audit(EngineConfig(mode=mode), prep.online, prep.f, prep.ue if mode != "no_ue_single_joint" else None)
        assert res.passed, (mode, res)


def test_causality_audit_catches_leak(prep):
    res = causality_audit(EngineConfig(mode="full"), prep.online, prep.f, prep.ue, engine_cls=LeakyEngine)
    assert not res.passed and not res.target_blind


def test_forecaster_never_changes(prep):
    before = prep.f.checksum()
    ue_before = prep.ue.checksum()
    for mode in MODES:
        run(prep, mode=mode)
    assert prep.f.checksum() == before
    assert prep.ue.checksum() == ue_before  # the engine adapts a private copy


def test_all_reliable_leaves_unreliable_expert_untouched(prep):
    eng = OnlineEngine(EngineConfig(kappa_alloc=1e9), prep.f, prep.ue)
    before = eng.unreliable.checksum()
    triggered = 0
    for b in iter_batches(prep.online, 8):
        out = eng.process_batch(b)
        triggered += out.triggered
        assert len(out.unreliable) == 0 or np.ptp(out.scores) == 0
    assert triggered > 0
    assert eng.unreliable.checksum() == before


def test_zero_noise_probe_is_identical(prep):
    rep = ue_noise_probe(EngineConfig(), prep.online, prep.f, prep.ue, noise_var=0.0)
    assert np.all(rep.rel_delta == 0.0)


def test_noise_changes_scores_but_stays_clamped(prep):
    rep = ue_noise_probe(EngineConfig(), prep.online, prep.f, prep.ue, noise_var=0.5, noise_batch=3)
    s = rep.noisy_scores[3]
    assert np.all((s >= 0) & (s <= 1))
    assert np.all(rep.rel_delta[:3] == 0.0)


def test_scores_in_unit_interval(prep):
    for mode in ABLATION_MODES[:-1]:
        for o in run(prep, mode=mode).outcomes:
            assert np.all((o.scores >= 0) & (o.scores <= 1))


def test_aggregate_over_seeds(prep):
    reps = [run(prep, seed=s) for s in (0, 1)]
    agg = aggregate(reps)
    assert agg["seeds"] == [0, 1]
    assert abs(agg["mse"] - (reps[0].mse + reps[1].mse) / 2) < 1e-12


@pytest.mark.parametrize("kw", [dict(mode="nope"), dict(p_trigger=1.5), dict(batch_size=0),
                                dict(loss_norm="x"), dict(noise_var=-1.0)])
def test_invalid_engine_config(kw):
    with pytest.raises(EngineConfigError):
        EngineConfig(**kw)


def test_mode_without_estimator_rejected(prep):
    with pytest.raises(EngineConfigError):
        OnlineEngine(EngineConfig(mode="full"), prep.f, None)


def test_raw_loss_and_pre_update_targets_run(prep):
    rep = run(prep, loss_norm="raw", ue_target="pre_update", input_cali="frozen", range_mode="frozen")
    assert np.isfinite(rep.mse)
