"""Run configuration: an INI file with typed sections.

Grammar (every key optional unless noted)::

    [grid]                      ; required
    l_in = 16                   ; lookback slots
    l_out = 4                   ; forecast slots
    n_vars = 4
    lookback = 16.0             ; time span before the split
    horizon = 4.0               ; time span after the split

    [data]
    path = data.jsonl           ; JSON-Lines stream (written by gen-data, read by the rest)
    train_frac = 0.2
    valid_frac = 0.05
    split_seed = 0

    [scenario]                  ; only needed by gen-data
    n_samples = 600
    seed = 0
    substeps = 2

    [regime.0]                  ; one section per regime, numbered in stream order
    start = 0.0                 ; fraction of the stream
    mean_offset = 0.0           ; scalar or comma list with n_vars entries
    ar = 0.6
    noise = 1.0
    missing = 0.3

    [forecaster]
    kind = linear               ; linear | locf
    checkpoint = forecaster.json
    epochs = 300
    patience = 5
    lr = 0.01
    batch_size = 32
    seed = 0

    [ue]
    checkpoint = ue.json
    epochs = 300
    patience = 10
    lr = 0.001
    batch_size = 32
    hidden = 64, 64
    seed = 0

    [engine]                    ; any EngineConfig field, e.g. mode, batch_size, kappa_trig

    [run]
    out = runs
    seeds = 0, 1, 2, 3, 4
    kappa_trig_sweep = 0.25, 0.75, 2.0, 3.0

Relative paths resolve against the config file's directory.  The output
directory may be overridden with the ``UNDERCALI_OUT`` environment variable.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .engine import EngineConfig, EngineConfigError
from .forecaster import TrainConfig
from .imts import GridConfigError, GridSpec
from .shiftgen import Regime, ScenarioError, ShiftScenario
from .uncertainty import PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    path: str = "data.jsonl"
    train_frac: float = 0.2
    valid_frac: float = 0.05
    split_seed: int = 0


@dataclass(frozen=True)
class ScenarioSection:
    n_samples: int = 600
    seed: int = 0
    substeps: int = 2


@dataclass(frozen=True)
class ForecasterSection:
    kind: str = "linear"
    checkpoint: str = "forecaster.json"
    epochs: int = 300
    patience: int = 5
    lr: float = 1e-2
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class UeSection:
    checkpoint: str = "ue.json"
    epochs: int = 300
    patience: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    hidden: tuple = (64, 64)
    seed: int = 0


@dataclass(frozen=True)
class RunSection:
    out: str = "runs"
    seeds: tuple = (0,)
    kappa_trig_sweep: tuple = (0.25, 0.75, 2.0, 3.0)


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec
    data: DataSection = DataSection()
    scenario: ScenarioSection = ScenarioSection()
    regimes: tuple = (Regime(0.0),)
    forecaster: ForecasterSection = ForecasterSection()
    ue: UeSection = UeSection()
    engine: EngineConfig = EngineConfig()
    run: RunSection = RunSection()
    base_dir: str = field(default=".", compare=False)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_dir(self) -> Path:
        env = os.environ.get("UNDERCALI_OUT")
        return Path(env) if env else self.resolve(self.run.out)

    def shift_scenario(self) -> ShiftScenario:
        try:
            return ShiftScenario(self.grid.n_vars, self.scenario.n_samples, self.grid, self.regimes,
                                 self.scenario.seed, self.scenario.substeps)
        except ScenarioError as exc:
            raise ConfigError(f"[scenario]: {exc}") from None

    def train_config(self) -> TrainConfig:
        f = self.forecaster
        return TrainConfig(f.epochs, f.patience, f.lr, f.batch_size, f.seed)

    def pretrain_config(self) -> PretrainConfig:
        u = self.ue
        return PretrainConfig(u.epochs, u.patience, u.lr, u.batch_size, u.seed)


# --- parsing ------------------------------------------------------------------------

def _convert(raw: str, typ, where: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if typ is tuple or origin is tuple:
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(_scalar(x) for x in items)
        if origin in (typing.Union, types.UnionType):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            vals = tuple(float(x) for x in items)
            return vals[0] if len(vals) == 1 else vals
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _scalar(x: str):
    try:
        return int(x)
    except ValueError:
        return float(x)


def _section(cls, items: dict, name: str, hints_for=None):
    hints = typing.get_type_hints(hints_for or cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(items) - known
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {', '.join(sorted(unknown))}")
    kwargs = {k: _convert(v, hints[k], f"[{name}] {k}") for k, v in items.items()}
    try:
        return cls(**kwargs)
    except (EngineConfigError, GridConfigError, ScenarioError, TypeError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    sections = set(cp.sections())
    if "grid" not in sections:
        raise ConfigError("missing [grid] section")
    regime_names = sorted((s for s in sections if s.startswith("regime.")), key=lambda s: _regime_no(s))
    allowed = {"grid", "data", "scenario", "forecaster", "ue", "engine", "run", *regime_names}
    extra = sections - allowed
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")

    def items(name):
        return dict(cp.items(name)) if cp.has_section(name) else {}

    kw = {
        "grid": _section(GridSpec, items("grid"), "grid"),
        "data": _section(DataSection, items("data"), "data"),
        "scenario": _section(ScenarioSection, items("scenario"), "scenario"),
        "forecaster": _section(ForecasterSection, items("forecaster"), "forecaster"),
        "ue": _section(UeSection, items("ue"), "ue"),
        "engine": _section(EngineConfig, items("engine"), "engine"),
        "run": _section(RunSection, items("run"), "run"),
        "base_dir": str(base_dir),
    }
    if regime_names:
        kw["regimes"] = tuple(_section(Regime, items(n), n) for n in regime_names)
    if kw["forecaster"].kind not in ("linear", "locf"):
        raise ConfigError(f"[forecaster] kind must be linear or locf, got {kw['forecaster'].kind!r}")
    return RunConfig(**kw)


def _regime_no(name: str) -> int:
    try:
        return int(name.split(".", 1)[1])
    except ValueError:
        raise ConfigError(f"regime sections must be numbered: [{name}]") from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)


# --- serialization ------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(dump_config(c)) == c``."""
    blocks = []

    def block(name, obj):
        lines = [f"[{name}]"]
        for f in dataclasses.fields(obj):
            if f.init:
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        blocks.append("\n".join(lines))

    block("grid", cfg.grid)
    block("data", cfg.data)
    block("scenario", cfg.scenario)
    for i, r in enumerate(cfg.regimes):
        block(f"regime.{i}", r)
    block("forecaster", cfg.forecaster)
    block("ue", cfg.ue)
    block("engine", cfg.engine)
    block("run", cfg.run)
    return "\n\n".join(blocks) + "\n"
