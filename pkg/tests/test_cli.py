import csv
import json
import subprocess
import sys

import pytest

from exaware.cli import main
from exaware.mlp import MLPModel


def test_train_attack_prob_stats(tmp_path, capsys):
    model = tmp_path / "m.json"
    assert main(["train", "Random6-3x1-1", "--out", str(model), "--epochs", "3",
                 "--seed", "4", "--n-samples", "100"]) == 0
    m = MLPModel.load(model)
    assert m.architecture.layer_sizes == (6, 3, 1) and m.training_seed == 4

    rep = tmp_path / "attack.json"
    code = main(["attack", str(model), "--seed", "1", "--box", "-1", "1",
                 "--budget-queries", "50000", "--out", str(rep)])
    d = json.loads(rep.read_text())
    assert code == (0 if d["verdict"] == "success" else 2)
    assert d["config"]["budget"]["max_queries"] == 50000
    assert d["queries_used"] <= 50000

    prob = tmp_path / "prob.csv"
    assert main(["prob", str(model), "--format", "csv", "--out", str(prob)]) == 0
    assert len(list(csv.DictReader(open(prob)))) == 3
    capsys.readouterr()
    assert main(["prob", str(model), "--range", "-1", "1"]) == 0
    assert "worst_case" in json.loads(capsys.readouterr().out)

    hist = tmp_path / "h.csv"
    assert main(["stats", str(model), "--histogram", str(hist)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["variance"] > 0 and len(stats["histogram"]["counts"]) == 60
    assert hist.is_file()


def test_experiment_and_report(tmp_path, capsys):
    cfg = {
        "name": "Random4-3x1-1",
        "output_dir": str(tmp_path / "ignored"),
        "dataset": {"kind": "random", "n_samples": 100, "seed": 0},
        "training_seeds": [1, 2],
        "extraction_seeds": [0],
        "training": {"epochs": 5, "batch_size": 32},
        "defense": {"lambda_similarity": 0.1},
        "attack": {"search_box": [-1.0, 1.0], "budget": {"max_queries": 1000}},
    }
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    out = tmp_path / "exp"
    assert main(["experiment", "--config", str(p), "--out", str(out), "--seed", "2",
                 "--budget-queries", "3000"]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["training_seeds"] == [2]
    assert saved["attack"]["budget"]["max_queries"] == 3000
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert "seed 2" in capsys.readouterr().out


def test_experiment_missing_mnist(tmp_path, capsys):
    cfg = {"name": "MNIST784-8x2-1", "output_dir": str(tmp_path / "exp"),
           "dataset": {"kind": "mnist"}, "attack": None}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    assert main(["experiment", "--config", str(p), "--mnist-dir", str(tmp_path / "none")]) == 1
    assert "dataset missing" in capsys.readouterr().out
    assert (tmp_path / "exp" / "table.csv").is_file()


def test_bad_model_name(tmp_path, capsys):
    assert main(["train", "Foo-1x1", "--out", str(tmp_path / "m.json")]) == 1
    assert "position 0" in capsys.readouterr().err


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "exaware.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for sub in ("train", "attack", "prob", "stats", "experiment", "report"):
        assert sub in r.stdout


def test_subcommand_required():
    with pytest.raises(SystemExit):
        main([])
