import csv

import numpy as np
import pytest

from undercali import cli, gradcheck
from undercali.gdc import CalibratorBlock

CONFIG = """
[grid]
l_in = 8
l_out = 2
n_vars = 2
lookback = 8.0
horizon = 2.0

[data]
path = data/stream.jsonl

[scenario]
n_samples = 120
seed = 3

[regime.0]
start = 0.0
missing = 0.3

[regime.1]
start = 0.5
mean_offset = 2.5
missing = 0.5

[forecaster]
checkpoint = data/f.json
epochs = 20

[ue]
checkpoint = data/ue.json
epochs = 10
hidden = 16, 16

[run]
out = runs
seeds = 0, 1
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.ini").write_text(CONFIG)
    cfg = str(d / "run.ini")
    for argv in (["gen-data"], ["pretrain", "forecaster"], ["pretrain", "ue"], ["run-online"], ["ablate"]):
        assert cli.main([*argv, "--config", cfg]) == 0, argv
    return d


def snapshot(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_pipeline_outputs(workdir):
    full = workdir / "runs" / "full"
    assert (full / "batches_seed0.csv").exists() and (full / "summary.json").exists()
    rows = read_rows(workdir / "runs" / "ablation" / "ablation.csv")
    assert [r["mode"] for r in rows][0] == "frozen" and rows[-1]["mode"] == "full"
    assert len(rows) == 8


def test_rerun_is_byte_identical(workdir, tmp_path):
    cfg = str(workdir / "run.ini")
    before = snapshot(workdir)
    for argv in (["gen-data"], ["pretrain", "forecaster"], ["pretrain", "ue"], ["run-online"], ["ablate"]):
        assert cli.main([*argv, "--config", cfg]) == 0
    assert snapshot(workdir) == before


def test_out_override_and_seed_override(workdir, tmp_path):
    cfg = str(workdir / "run.ini")
    assert cli.main(["run-online", "--config", cfg, "--mode", "frozen", "--seed", "5", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "frozen" / "batches_seed5.csv").exists()


def test_report(workdir, tmp_path):
    runs = workdir / "runs"
    assert cli.main(["report", str(runs / "full"), str(runs / "ablation"), "--out", str(tmp_path)]) == 0
    merged = read_rows(tmp_path / "merged_long.csv")
    n_in = sum(len(read_rows(p)) for d in (runs / "full", runs / "ablation") for p in d.rglob("batches_seed*.csv"))
    assert len(merged) == n_in
    sweep = read_rows(tmp_path / "trigger_sweep.csv")
    assert [float(r["kappa_trig"]) for r in sweep] == [0.25, 0.75, 2.0, 3.0]
    freqs = [float(r["update_frequency"]) for r in sweep]
    assert freqs == sorted(freqs, reverse=True)


def test_report_rejects_missing_dir(tmp_path):
    assert cli.main(["report", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1


def test_gradcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["gradcheck"]) == 0
    real = CalibratorBlock.backward

    def broken(self, cache, dout):
        dv = real(self, cache, dout)
        self.W.grad *= 1.5
        return dv

    monkeypatch.setattr(CalibratorBlock, "backward", broken)
    assert cli.main(["gradcheck"]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_pretrain_ue_needs_forecaster(tmp_path, capsys):
    (tmp_path / "run.ini").write_text(CONFIG)
    cfg = str(tmp_path / "run.ini")
    assert cli.main(["gen-data", "--config", cfg]) == 0
    assert cli.main(["pretrain", "ue", "--config", cfg]) == 1
    assert "pretrain forecaster" in capsys.readouterr().err


def test_missing_data_and_bad_config(tmp_path):
    (tmp_path / "run.ini").write_text(CONFIG)
    assert cli.main(["pretrain", "forecaster", "--config", str(tmp_path / "run.ini")]) == 1
    (tmp_path / "bad.ini").write_text("[grid]\nl_in = x\n")
    assert cli.main(["run-online", "--config", str(tmp_path / "bad.ini")]) == 1
    assert cli.main(["run-online", "--config", str(tmp_path / "absent.ini")]) == 1


def test_usage_errors():
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["--help"]) == 0
