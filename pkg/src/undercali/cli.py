"""Command-line entry point.

    undercali gen-data   --config run.ini
    undercali pretrain   {forecaster,ue} --config run.ini
    undercali run-online --config run.ini [--seed 0,1,2] [--mode full] [--out DIR]
    undercali ablate     --config run.ini [--seed ...] [--out DIR]
    undercali gradcheck
    undercali report     RUN_DIR [RUN_DIR ...] --out DIR [--column mse] [--kappa 0.25,0.75,2,3]

Exit codes: 0 success, 1 usage or configuration error, 2 failed check.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .arm import replay_trigger_count
from .config import ConfigError, RunConfig, RunSection, load_config
from .engine import ABLATION_MODES, MODES, EngineConfigError, aggregate, dumps_json, run_stream
from .forecaster import LinearGridForecaster, load_forecaster, make_forecaster, train_offline
from .gradcheck import TOLERANCE, run_gradchecks
from .imts import DataError, GridConfigError, dump_jsonl, load_jsonl
from .pipeline import split_batches
from .shiftgen import generate
from .uncertainty import UncertaintyEstimator, pretrain

log = logging.getLogger("undercali")

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2


class UsageError(Exception):
    pass


def _grid_tuple(g):
    return (g.l_in, g.l_out, g.n_vars, g.lookback, g.horizon)


def _load_split(cfg: RunConfig):
    path = cfg.resolve(cfg.data.path)
    if not path.exists():
        raise UsageError(f"dataset not found: {path} (run gen-data first?)")
    samples = list(load_jsonl(path, cfg.grid))
    return split_batches(samples, cfg.grid, cfg.data.train_frac, cfg.data.valid_frac, cfg.data.split_seed)


def _load_forecaster(cfg: RunConfig):
    path = cfg.resolve(cfg.forecaster.checkpoint)
    if not path.exists():
        if cfg.forecaster.kind == "locf":
            return make_forecaster("locf", cfg.grid)
        raise UsageError(f"forecaster checkpoint not found: {path} (run 'pretrain forecaster' first)")
    f = load_forecaster(path)
    if _grid_tuple(f.grid) != _grid_tuple(cfg.grid):
        raise UsageError(f"forecaster checkpoint grid {_grid_tuple(f.grid)} != config grid {_grid_tuple(cfg.grid)}")
    return f


def _load_ue(cfg: RunConfig):
    path = cfg.resolve(cfg.ue.checkpoint)
    if not path.exists():
        raise UsageError(f"uncertainty estimator checkpoint not found: {path} (run 'pretrain ue' first)")
    ue = UncertaintyEstimator.load(path, cfg.engine.range_mode)
    if _grid_tuple(ue.grid) != _grid_tuple(cfg.grid):
        raise UsageError(f"estimator checkpoint grid {_grid_tuple(ue.grid)} != config grid {_grid_tuple(cfg.grid)}")
    return ue


def _seeds(cfg: RunConfig, arg: str | None):
    if not arg:
        return list(cfg.run.seeds)
    try:
        return [int(s) for s in arg.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seed expects comma-separated integers, got {arg!r}") from None


def _out(cfg: RunConfig, arg: str | None) -> Path:
    return Path(arg) if arg else cfg.out_dir


# --- commands -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    scenario = cfg.shift_scenario()
    if args.seed:
        scenario = dataclasses.replace(scenario, seed=_seeds(cfg, args.seed)[0])
    path = Path(args.out) if args.out else cfg.resolve(cfg.data.path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = dump_jsonl(generate(scenario), path)
    print(f"wrote {n} samples to {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if args.kind == "forecaster":
        train, valid, _ = _load_split(cfg)
        f = make_forecaster(cfg.forecaster.kind, cfg.grid)
        if isinstance(f, LinearGridForecaster):
            hist = train_offline(f, train, valid, cfg.train_config())
            print(f"forecaster: {len(hist.valid_loss)} epochs, best epoch {hist.best_epoch}, "
                  f"valid mse {min(hist.valid_loss):.6g}")
        path = cfg.resolve(cfg.forecaster.checkpoint)
        f.save(path)
        print(f"wrote {path}")
        return EXIT_OK
    f = _load_forecaster(cfg)
    train, valid, _ = _load_split(cfg)
    pc = cfg.pretrain_config()
    ue = UncertaintyEstimator(cfg.grid, np.random.Generator(np.random.Philox(np.random.SeedSequence([pc.seed, 7]))),
                              hidden=tuple(cfg.ue.hidden), lr=pc.lr)
    hist = pretrain(ue, f, train, valid, pc)
    path = cfg.resolve(cfg.ue.checkpoint)
    ue.save(path)
    print(f"uncertainty estimator: {len(hist.valid_loss)} epochs, best epoch {hist.best_epoch}, "
          f"valid L1 {min(hist.valid_loss):.6g}")
    print(f"wrote {path}")
    return EXIT_OK


def _run_mode(cfg: RunConfig, mode: str, seeds, out: Path, online, f, ue):
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for s in seeds:
        ecfg = dataclasses.replace(cfg.engine, mode=mode, seed=s)
        rep = run_stream(ecfg, online, f, ue if ecfg.uses_ue else None)
        (out / f"batches_seed{s}.csv").write_text(rep.to_csv())
        (out / f"summary_seed{s}.json").write_text(dumps_json(rep.summary()))
        reports.append(rep)
    agg = aggregate(reports)
    (out / "summary.json").write_text(dumps_json(agg))
    return agg


def cmd_run_online(args) -> int:
    cfg = load_config(args.config)
    mode = args.mode or cfg.engine.mode
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    f = _load_forecaster(cfg)
    ue = _load_ue(cfg) if mode != "no_ue_single_joint" else None
    _, _, online = _load_split(cfg)
    before = f.checksum()
    agg = _run_mode(cfg, mode, _seeds(cfg, args.seed), _out(cfg, args.out) / mode, online, f, ue)
    assert f.checksum() == before, "source forecaster parameters changed during the run"
    print(f"{mode}: mse {agg['mse']:.6g} +/- {agg['mse_std']:.3g}, mae {agg['mae']:.6g}, "
          f"update frequency {agg['update_frequency']:.3f} over {agg['n_batches']} batches")
    return EXIT_OK


ABLATION_LABELS = {
    "single_expert_joint": "w/o GDC (Single Expert, Joint)",
    "single_expert_reliable": "w/o GDC (Single Expert, Reliable)",
    "single_expert_unreliable": "w/o GDC (Single Expert, Unreliable)",
    "random_triggering": "w/o ARM (Random Triggering)",
    "random_allocating": "w/o ARM (Random Allocating)",
    "no_ue_single_joint": "w/o All (Single Expert, Joint)",
    "full": "full",
    "frozen": "frozen source forecaster",
}
ABLATION_ORDER = ("frozen", *ABLATION_MODES[1:], "full")


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    f = _load_forecaster(cfg)
    ue = _load_ue(cfg)
    _, _, online = _load_split(cfg)
    seeds = _seeds(cfg, args.seed)
    root = _out(cfg, args.out) / "ablation"
    rows = []
    for mode in ABLATION_ORDER:
        agg = _run_mode(cfg, mode, seeds, root / mode, online, f, ue)
        rows.append({"mode": mode, "variant": ABLATION_LABELS[mode], "mse": repr(agg["mse"]),
                     "mse_std": repr(agg["mse_std"]), "mae": repr(agg["mae"]), "mae_std": repr(agg["mae_std"]),
                     "update_frequency": repr(agg["update_frequency"]),
                     "seeds": " ".join(str(s) for s in agg["seeds"])})
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['variant']:40s} mse {float(r['mse']):.6g}  freq {float(r['update_frequency']):.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(args.seed_int)
    ok = True
    for r in results:
        flag = "ok" if r.passed else "FAIL"
        print(f"{r.component:20s} max rel err {r.max_rel_error:.3e}  worst {r.worst_param}{list(r.worst_index)}  {flag}")
        ok &= r.passed
    print(f"tolerance {TOLERANCE:g}: {'all passed' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_CHECK


def _batch_csvs(dirs):
    files = []
    for d in dirs:
        d = Path(d)
        if not d.exists():
            raise UsageError(f"run directory not found: {d}")
        files.extend(sorted(d.rglob("batches_seed*.csv")))
    if not files:
        raise UsageError("no batches_seed*.csv files under the given run directories")
    return files


def cmd_report(args) -> int:
    files = _batch_csvs(args.run_dirs)
    if args.kappa is None:
        run = load_config(args.config).run if args.config else RunSection()
        args.kappa = ",".join(repr(float(k)) for k in run.kappa_trig_sweep)
    try:
        kappas = [float(k) for k in args.kappa.split(",")]
    except ValueError:
        raise UsageError(f"--kappa expects comma-separated numbers, got {args.kappa!r}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    common = Path(*_common_parts(files))
    long_rows, moments_by_run = [], []
    for path in files:
        series = str(path.relative_to(common).with_suffix("")) if common.parts else str(path.with_suffix(""))
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and args.column not in rows[0]:
            raise UsageError(f"{path}: no column {args.column!r}")
        for r in rows:
            long_rows.append((r["batch_index"], series, r[args.column]))
        moments = [(float(r["mean_uncertainty"]), float(r["var_uncertainty"])) for r in rows]
        if moments and all(math.isfinite(m) and math.isfinite(v) for m, v in moments):
            moments_by_run.append(moments)
    with open(out / "merged_long.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch_index", "series", "value"])
        w.writerows(long_rows)
    alpha = args.alpha_trig
    with open(out / "trigger_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kappa_trig", "update_frequency", "n_runs"])
        for k in kappas:
            freqs = [replay_trigger_count(m, alpha, k) / len(m) for m in moments_by_run]
            w.writerow([repr(k), repr(float(np.mean(freqs))) if freqs else "nan", len(freqs)])
    print(f"merged {len(long_rows)} rows from {len(files)} files into {out / 'merged_long.csv'}")
    print(f"trigger sweep over {len(kappas)} kappa values written to {out / 'trigger_sweep.csv'}")
    return EXIT_OK


def _common_parts(files):
    parts = [p.parent.parts for p in files]
    common = []
    for items in zip(*parts):
        if len(set(items)) != 1:
            break
        common.append(items[0])
    return common


# --- argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="undercali", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True, mode=False, out=True):
        sp.add_argument("--config", required=True, help="INI run configuration")
        if seeds:
            sp.add_argument("--seed", help="comma-separated seed list, overrides [run] seeds")
        if mode:
            sp.add_argument("--mode", help=f"one of: {', '.join(MODES)}")
        if out:
            sp.add_argument("--out", help="output location, overrides [run] out and UNDERCALI_OUT")

    sp = sub.add_parser("gen-data", help="write a synthetic JSONL stream")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="offline training of the forecaster or the uncertainty estimator")
    sp.add_argument("kind", choices=("forecaster", "ue"))
    common(sp, seeds=False, out=False)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("run-online", help="online adaptation over the held-out stream")
    common(sp, mode=True)
    sp.set_defaults(func=cmd_run_online)

    sp = sub.add_parser("ablate", help="all ablation modes plus the frozen baseline")
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    sp.add_argument("--seed", dest="seed_int", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("report", help="merge run CSVs and replay the trigger-threshold sweep")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--column", default="mse")
    sp.add_argument("--kappa", help="comma-separated kappa_trig values (default: [run] kappa_trig_sweep)")
    sp.add_argument("--config", help="take the kappa sweep from this configuration")
    sp.add_argument("--alpha-trig", type=float, default=0.25)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, DataError, GridConfigError, EngineConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
