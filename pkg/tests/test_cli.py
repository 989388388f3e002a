import json
from pathlib import Path

import pytest

from gdw.cli import build_parser, main
from gdw.experiment import SCHEMA_VERSION


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out


def test_run_then_report(tmp_path, capsys):
    out = tmp_path / "smoke"
    assert main(["run", "--preset", "smoke", "--out", str(out), "--mode", "gdw", "--mode", "plain"]) == 0
    before = (out / "summary.json").read_text()
    assert set(json.loads(before)["modes"]) == {"gdw", "plain"}
    capsys.readouterr()
    assert main(["report", str(out), "--write"]) == 0
    assert "gdw" in capsys.readouterr().out
    assert (out / "summary.json").read_text() == before


def test_seed_and_epoch_overrides(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--preset", "smoke", "--out", str(out), "--seed", "5", "--seed", "6",
                 "--mode", "plain", "--epochs", "1"]) == 0
    cfg = json.loads((out / "config.json").read_text())["config"]
    assert cfg["seeds"] == [5, 6] and cfg["trainer"]["epochs"] == 1


def test_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, "name": "c", "modes": ["plain"],
                                "dataset": {"per_class": 20, "dim": 3, "test_per_class": 10},
                                "trainer": {"epochs": 1, "hidden": [4]}, "meta_per_class": 2}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "metrics.csv").exists()


def test_ablate_prints_variances(tmp_path, capsys):
    assert main(["ablate", "--preset", "smoke", "--out", str(tmp_path / "ab")]) == 0
    text = capsys.readouterr().out
    assert "batch-loss variance" in text and "gdw-no-constraint" in text


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, "seeds": []}))
    assert main(["run", "--config", str(path)]) == 2
    assert "empty" in capsys.readouterr().err
    assert main(["run", "--config", str(path), "--preset", "smoke"]) == 2


def test_unknown_mode_rejected_by_parser():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "--mode", "mwnet"])
