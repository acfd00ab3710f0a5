import csv
import json

import pytest

from transformeeg import experiment as ex
from transformeeg.cli import main
from transformeeg.evaluation import load_splits
from transformeeg.training import TrainConfig


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cohort")
    assert main(["synth", "--subjects-per-class", "4", "--length", "12", "--out", str(d)]) == 0
    return d


@pytest.fixture()
def config_file(cohort_dir, tmp_path):
    cfg = ex.desk_config(str(cohort_dir / "manifest.json"), str(tmp_path / "out"))
    cfg.train = TrainConfig(max_epochs=2, patience=2, batch_size=32)
    cfg.n_outer, cfg.n_inner = 2, 2
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_synth_writes_manifest(cohort_dir):
    m = json.loads((cohort_dir / "manifest.json").read_text())
    assert len(m) == 8


def test_ingest(cohort_dir, tmp_path, capsys):
    assert main(["ingest", "--manifest", str(cohort_dir / "manifest.json"), "--window", "4",
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "ingest.json").read_text())
    # 12 s at 4 s windows with 1 s overlap: starts at 0, 3, 6 -> 3 windows
    assert rep["subjects"] == 8 and rep["windows"] == 24 and rep["window_shape"] == [8, 500]


def test_split(config_file, tmp_path):
    assert main(["split", "--config", str(config_file)]) == 0
    plans = load_splits(tmp_path / "out" / "splits.json")
    assert len(plans) == 4


def test_global_flags_after_subcommand(cohort_dir, tmp_path):
    out = tmp_path / "o"
    assert main(["split", "--manifest", str(cohort_dir / "manifest.json"), "--seed", "3",
                 "--n-outer", "2", "--n-inner", "2", "--out", str(out)]) == 0
    assert len(load_splits(out / "splits.json")) == 4


def test_train_selector_then_eval_matches_library(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["train", "--config", str(config_file), "--select", "outer=1,inner=0"]) == 0
    trained = sorted(p.name for p in (out / "splits").iterdir())
    assert trained == ["o01_i00"]
    assert main(["eval", "--config", str(config_file), "--select", "outer=1,inner=0"]) == 0

    cfg = ex.ExperimentConfig.load(config_file)
    windows = ex.load_windows(cfg)
    plans = ex.select_plans(ex.plan_splits(windows, cfg), "outer=1,inner=0")
    lib = ex.metrics_csv(ex.run_plans(cfg, plans, windows, write=False))
    assert (out / "metrics.csv").read_text() == lib


def test_eval_without_threshold_correction_and_with_aggregation(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["train", "--config", str(config_file), "--select", "outer=0,inner=1"]) == 0
    assert main(["eval", "--config", str(config_file), "--select", "outer=0,inner=1",
                 "--no-threshold-correction", "--aggregate"]) == 0
    rows = read_csv(out / "metrics.csv")
    assert all(float(r["threshold"]) == 0.5 for r in rows)
    assert {"min_ratio", "rec_tp", "rec_bal_acc"} <= set(rows[0])
    summary = json.loads((out / "summary.json").read_text())
    assert "rec_bal_acc" in summary["metrics"]
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "report.md").read_text().startswith("N-LNSO splits: 1")


def test_aug_search_from_results(tmp_path, capsys):
    res = tmp_path / "r.csv"
    res.write_text("composition,median,iqr\nbaseline,69.40,10.76\nMasking+TimeReverse,75.18,5.85\n"
                   "SignFlip,68.0,5.0\nTimeReverse,75.0,12.0\n")
    assert main(["aug-search", "--results", str(res), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "aris.csv")
    assert rows[0]["composition"] == "Masking+TimeReverse"
    assert float(rows[0]["aris"]) == pytest.approx(0.0380045, rel=1e-5)
    assert {r["composition"]: float(r["aris"]) for r in rows[1:]} == {"SignFlip": 0.0, "TimeReverse": 0.0}


def test_parse_candidates():
    assert len(ex.parse_candidates("all")) == 100
    comps = ex.parse_candidates("Masking+TimeReverse,SignFlip")
    assert [c.name for c in comps] == ["Masking+TimeReverse", "SignFlip"]
    with pytest.raises(ex.ConfigError):
        ex.parse_candidates("Masking+SignFlip+TimeReverse")
    with pytest.raises(ex.ConfigError):
        ex.parse_candidates("Jitter")


# --- exit codes ---------------------------------------------------------------------

def test_exit_code_config_errors(tmp_path, config_file):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--all"]) == 2
    (tmp_path / "bad.json").write_text('{"no_such_key": 1}')
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--all"]) == 2
    assert main(["train", "--config", str(config_file), "--select", "outer=9"]) == 2
    assert main(["eval", "--config", str(config_file), "--all"]) == 2  # no checkpoints yet
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 2
    assert main(["split"]) == 2


def test_exit_code_data_errors(tmp_path):
    assert main(["synth", "--subjects-per-class", "0", "--out", str(tmp_path / "z")]) == 3
    (tmp_path / "m.json").write_text("[]")
    assert main(["ingest", "--manifest", str(tmp_path / "m.json")]) == 3


def test_exit_code_numerical_error(monkeypatch, config_file):
    from transformeeg.model import NumericalError

    def boom(*a, **k):
        raise NumericalError("non-finite gradient in enc.0.attn")

    monkeypatch.setattr(ex, "run_plans", boom)
    assert main(["train", "--config", str(config_file), "--all"]) == 4


def test_aug_search_runs_candidates(config_file, tmp_path):
    cfg = ex.ExperimentConfig.load(config_file)
    cfg.train = TrainConfig(max_epochs=1, patience=1, batch_size=32)
    baseline, rows = ex.augmentation_search(cfg, ex.parse_candidates("SignFlip,Masking+TimeReverse"))
    assert 0 <= baseline[0] <= 100
    assert sorted(r["composition"] for r in rows) == ["Masking+TimeReverse", "SignFlip"]
    assert all(r["aris"] >= 0 or r["aris"] != r["aris"] for r in rows)
    assert main(["aug-search", "--config", str(config_file), "--candidates", "SignFlip"]) == 0
    assert read_csv(tmp_path / "out" / "aris.csv")[0]["composition"] == "SignFlip"
