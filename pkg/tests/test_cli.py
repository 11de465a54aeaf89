import csv
import json

import numpy as np
import pytest

from driftforge.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, drift_features, main
from driftforge.data import CsvSchema, kline_violations, load_panel_csv, write_panel_csv
from driftforge.synthetic import PanelSpec, synthetic_panel

SMALL = """
seed = 3
out = "{out}"
[data]
paths = ["panel.csv"]
[split]
lookback = 10
stats_window = 10
[model]
hidden = 6
feature_width = 6
[trainer]
max_epochs = 2
start_epoch = 0
freq = 3
batch_size = 32
planner_hidden = 6
planner_batch = 4
valid_batch = 16
[scheduler]
tau = 0.5
[env]
lookback = 10
[diagnostics]
folds = 2
mmd_points = 50
"""


@pytest.fixture()
def workspace(tmp_path):
    write_panel_csv(synthetic_panel(PanelSpec(n_stocks=3, n_timestamps=150), seed=1), tmp_path / "panel.csv")
    out = tmp_path / "out"
    cfg = tmp_path / "run.toml"
    cfg.write_text(SMALL.format(out=out))
    return tmp_path, cfg, out


def test_config_defaults_command(capsys):
    assert main(["config", "--defaults"]) == EXIT_OK
    assert "[trainer]" in capsys.readouterr().out


def test_missing_seed_exits_with_config_code(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("DRIFTFORGE_SEED", raising=False)
    p = tmp_path / "c.toml"
    p.write_text("[trainer]\nfreq = 2\n")
    assert main(["ingest", "--config", str(p)]) == EXIT_CONFIG
    assert "seed" in capsys.readouterr().err


def test_bad_ratio_exits_with_config_code(workspace, capsys):
    root, cfg, _ = workspace
    cfg.write_text(cfg.read_text().replace("lookback = 10\nstats", "ratios = [0.5, 0.5, 0.5]\nlookback = 10\nstats"))
    assert main(["ingest", "--config", str(cfg)]) == EXIT_CONFIG
    assert "split.ratios" in capsys.readouterr().err


def test_ingest_and_manifest(workspace):
    _, cfg, out = workspace
    assert main(["ingest", "--config", str(cfg)]) == EXIT_OK
    report = json.loads((out / "schema_report.json").read_text())
    assert report["split_sizes"] == [90, 30, 30] and report["kline_violations"] == 0
    first = (out / "manifest_ingest.json").read_text()
    assert main(["ingest", "--config", str(cfg)]) == EXIT_OK
    assert (out / "manifest_ingest.json").read_text() == first
    m = json.loads(first)
    assert m["seed"] == 3 and len(m["config_hash"]) == 16 and "panel.npz" in m["outputs"]


def test_augment_replay_and_tamper(workspace, capsys):
    _, cfg, out = workspace
    assert main(["augment", "--config", str(cfg)]) == EXIT_OK
    assert main(["replay", "--config", str(cfg)]) == EXIT_OK
    a = (out / "augmented.csv").read_bytes()
    assert (out / "replayed_augmented.csv").read_bytes() == a
    rows = list(csv.reader(open(out / "augmented.csv")))[1:]
    w = np.array([[float(x) for x in r[4:9]] for r in rows])
    assert not kline_violations(w).any()
    lines = (out / "provenance.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    rec["checksum"] = "f" * 64
    (out / "bad.jsonl").write_text(json.dumps(rec) + "\n")
    assert main(["replay", "--config", str(cfg), "--log", str(out / "bad.jsonl")]) == EXIT_RUNTIME
    assert "checksum" in capsys.readouterr().err


def test_train_then_replay(workspace):
    _, cfg, out = workspace
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    metrics = json.loads((out / "metrics.json").read_text())
    assert np.isfinite(metrics["valid_mse"]) and np.isfinite(metrics["test_mse"])
    for name in ("history.csv", "model.npz", "planner.npz", "provenance.jsonl", "manifest_train.json"):
        assert (out / name).is_file()
    assert main(["replay", "--config", str(cfg)]) == EXIT_OK


def test_train_seed_override_changes_hash(workspace):
    _, cfg, out = workspace
    assert main(["ingest", "--config", str(cfg), "--seed", "4"]) == EXIT_OK
    assert json.loads((out / "manifest_ingest.json").read_text())["seed"] == 4


def test_drift_report_stylized_facts_discriminate_backtest(workspace):
    root, cfg, out = workspace
    assert main(["drift-report", "--config", str(cfg)]) == EXIT_OK
    lines = (out / "drift_report.csv").read_text().splitlines()
    assert lines[0] == "fold,pair,metric,feature,value"
    assert main(["stylized-facts", "--config", str(cfg), "--reference", str(root / "panel.csv")]) == EXIT_OK
    header = (out / "stylized_facts.csv").read_text().splitlines()[0]
    assert "diff_acf_abs_r" in header
    assert main(["augment", "--config", str(cfg)]) == EXIT_OK
    assert main(["discriminate", "--config", str(cfg), "--synthetic", str(out / "augmented.csv")]) == EXIT_OK
    row = list(csv.DictReader(open(out / "discriminative_score.csv")))[0]
    assert -0.5 <= float(row["score"]) <= 0.5
    assert main(["backtest", "--config", str(cfg)]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "backtest_metrics.csv")))
    assert len(rows) == 3 and all(r["policy"] == "buy_and_hold" for r in rows)


def test_backtest_with_model_checkpoint(workspace):
    _, cfg, out = workspace
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    text = cfg.read_text().replace("[env]\n", f'[env]\npolicy = "model"\ncheckpoint = "{out / "model.npz"}"\n')
    cfg.write_text(text)
    assert main(["backtest", "--config", str(cfg)]) == EXIT_OK
    text = cfg.read_text().replace(f'checkpoint = "{out / "model.npz"}"', 'checkpoint = ""')
    cfg.write_text(text)
    assert main(["backtest", "--config", str(cfg)]) == EXIT_CONFIG


def test_synth_command(tmp_path):
    path = tmp_path / "s.csv"
    assert main(["synth", "--seed", "2", "--out", str(tmp_path), "--stocks", "2", "--timestamps", "80", "--path", str(path)]) == EXIT_OK
    panel = load_panel_csv([path], CsvSchema(stock="stock"))
    assert panel.shape == (80, 2, 5)


def test_drift_features_view():
    panel = synthetic_panel(PanelSpec(n_stocks=2, n_timestamps=30), seed=0)
    f = drift_features(panel)
    c = panel.values[:, :, 3]
    assert f.shape == (29, 2, 5)
    np.testing.assert_allclose(f[:, :, 0], np.log(c[1:] / c[:-1]))
