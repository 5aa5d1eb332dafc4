import json

import pytest
import yaml

from ippo.cli import main


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "exp.yaml"
    p.write_text(yaml.safe_dump({
        "problem": "shipment", "d_l": 3, "n": 40, "replications": 1, "r2_ladder": [0.4, 0.8],
        "methods": ["perfect", "saa", "knn", "feature_based"], "k_grid": [1, 5, 28],
        "lambda1_grid": [0.5, 1.0], "ippo_train_size": 4, "output_dir": str(tmp_path / "run"),
    }))
    return p


def test_run_audit_report(cfg_file, tmp_path, capsys):
    assert main(["run", str(cfg_file)]) == 0
    assert (tmp_path / "run" / "results.csv").exists()
    assert main(["audit", str(tmp_path / "run")]) == 0
    assert main(["report", str(tmp_path / "run" / "results.csv"), "--out", str(tmp_path / "rep")]) == 0
    out = capsys.readouterr().out
    assert "checked 24 rows" in out
    assert (tmp_path / "rep" / "cost_vs_r2_shipment_test.svg").exists()


def test_tune_writes_table(cfg_file, tmp_path):
    assert main(["tune", str(cfg_file), "--param", "k", "--level", "1"]) == 0
    assert main(["tune", str(cfg_file), "--param", "lambda1", "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "tuning.svg").exists()
    lines = (tmp_path / "t" / "tuning.csv").read_text().splitlines()
    assert lines[0] == "lambda1,train_cost,valid_cost,status" and len(lines) == 3


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("problem: newsvendor\nreplicas: 3\n")
    assert main(["run", str(bad)]) == 2
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2
    assert main(["audit", str(tmp_path)]) == 2
    assert "unknown configuration keys" in capsys.readouterr().err


def test_datagen_and_pha(tmp_path):
    d = tmp_path / "ds"
    assert main(["datagen", "--problem", "newsvendor", "--d-l", "1", "--d-x", "1", "--r2", "0.5",
                 "--n", "10", "--out", str(d)]) == 0
    assert (d / "meta.json").exists()
    code = main(["pha", "--data", str(d), "--scenarios", "2", "--fix-pattern", "--delta", "1e9",
                 "--out", str(tmp_path / "pha")])
    assert code == 0
    summary = json.loads((tmp_path / "pha" / "summary.json").read_text())
    assert summary["iterations"] == 1 and summary["scenarios"] == 2
    assert (tmp_path / "pha" / "pha_trace.csv").exists()
    assert main(["pha", "--data", str(d), "--scenarios", "2", "--max-iter", "1", "--delta", "1e-12",
                 "--out", str(tmp_path / "pha2")]) == 3
