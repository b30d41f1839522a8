"""Offline preparation shared by the CLI and the experiment harness."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .forecaster import LinearGridForecaster, SourceForecaster, TrainConfig, make_forecaster, train_offline
from .imts import GridSpec, ImtsSample, MaskedBatch, split_stream
from .shiftgen import generate, mean_shift_scenario
from .uncertainty import PretrainConfig, UncertaintyEstimator, pretrain


@dataclass
class Prepared:
    f: SourceForecaster
    ue: UncertaintyEstimator
    train: MaskedBatch
    valid: MaskedBatch
    online: MaskedBatch


def split_batches(samples: Sequence[ImtsSample], grid: GridSpec, train_frac=0.2, valid_frac=0.05, seed=0):
    data = MaskedBatch.from_samples(list(samples), grid)
    tr, va, on = split_stream(len(data), train_frac, valid_frac, seed)
    return data.subset(tr), data.subset(va), data.subset(on)


def prepare(samples: Sequence[ImtsSample], grid: GridSpec, kind: str = "linear", seed: int = 0,
            train_frac: float = 0.2, valid_frac: float = 0.05, train_cfg: TrainConfig | None = None,
            ue_cfg: PretrainConfig | None = None, ue_hidden=(64, 64)) -> Prepared:
    train, valid, online = split_batches(samples, grid, train_frac, valid_frac, seed)
    f = make_forecaster(kind, grid)
    if isinstance(f, LinearGridForecaster):
        train_offline(f, train, valid, train_cfg or TrainConfig(seed=seed))
    ue_cfg = ue_cfg or PretrainConfig(seed=seed)
    ue = UncertaintyEstimator(grid, np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7]))),
                              hidden=ue_hidden, lr=ue_cfg.lr)
    pretrain(ue, f, train, valid, ue_cfg)
    return Prepared(f, ue, train, valid, online)


SHIFT_GRID = GridSpec(l_in=16, l_out=4, n_vars=4, lookback=16.0, horizon=4.0)


def shift_benchmark(seed: int, n_samples: int = 600) -> Prepared:
    """The reference synthetic setting: 2-sigma level jump at mid-stream, missing rate 0.3 -> 0.5."""
    scenario = mean_shift_scenario(SHIFT_GRID, n_samples=n_samples, seed=seed)
    return prepare(list(generate(scenario)), SHIFT_GRID, "linear", seed=seed)
