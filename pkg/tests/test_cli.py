import csv
import json
import subprocess
import sys
from dataclasses import replace

import pytest

from postdenit import cli
from postdenit.biofilter import NumericalFault
from postdenit.harness import CSV_COLUMNS, ScenarioSpec


def _config(tmp_path, name="short", mode="classical", **run):
    spec = replace(ScenarioSpec(), name=name, mode=mode, duration=1.5, warmup=1.0, dt=30.0 / 86400.0)
    cfg = spec.to_config()
    cfg["run"].update(run)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_simulate_writes_csv_and_summary(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["simulate", str(cfg), "--mode", "classical+mfc", "--out", str(out)]) == 0
    rows = list(csv.reader((out / "short.csv").open()))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 1 + 433
    summary = json.loads((out / "short_summary.json").read_text())
    assert summary["provenance"]["mode"] == "classical+mfc"
    assert summary["window"] == [1.0, 1.5]
    assert set(summary["stats"]) == {"NO2_out", "NO3_out", "NOx_out", "meoh_kgd"}
    assert summary["mass_balance"]["N"]["relative"] <= 1e-6
    assert "NO2_out mean" in capsys.readouterr().out


def test_compare_writes_report(tmp_path):
    a = _config(tmp_path, "base")
    b = _config(tmp_path, "mfc", mode="classical+mfc")
    out = tmp_path / "cmp"
    assert cli.main(["compare", str(a), str(b), "--out", str(out)]) == 0
    report = json.loads((out / "comparison.json").read_text())
    assert report["names"] == ["base", "mfc"]
    rows = list(csv.reader((out / "comparison.csv").open()))
    assert rows[0] == ["strategy", *CSV_COLUMNS]
    assert {r[0] for r in rows[1:]} == {"base", "mfc"}
    assert len(rows) == 1 + 2 * 433


def test_gen_influent(tmp_path):
    cfg = _config(tmp_path)
    assert cli.main(["gen-influent", str(cfg), "--step", "0.25", "--out", str(tmp_path)]) == 0
    rows = list(csv.reader((tmp_path / "short_influent.csv").open()))
    assert len(rows) == 1 + 7


def test_calibrate_prints_k(tmp_path, capsys):
    cfg = _config(tmp_path)
    code = cli.main(["calibrate", str(cfg), "--target", "0.8", "--k-min", "2", "--k-max", "5", "--out", str(tmp_path)])
    assert code == 0
    assert capsys.readouterr().out.startswith("K* = ")
    doc = json.loads((tmp_path / "short_calibration.json").read_text())
    assert abs(doc["mean_NO2"] - 0.8) <= 0.02


def test_calibration_failure_exit_code(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert cli.main(["calibrate", str(cfg), "--k-min", "6", "--k-max", "8"]) == cli.EXIT_FAILED
    assert "bracket" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"plant": {"porosity": 2.0}}))
    assert cli.main(["simulate", str(p)]) == cli.EXIT_CONFIG
    assert "porosity" in capsys.readouterr().err


def test_numerical_fault_exit_code(tmp_path, monkeypatch):
    def boom(spec):
        raise NumericalFault("plant state diverged")

    monkeypatch.setattr(cli, "run_scenario", boom)
    assert cli.main(["simulate", str(_config(tmp_path)), "--out", str(tmp_path)]) == cli.EXIT_NUMERICAL


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "postdenit", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("simulate", "compare", "calibrate", "gen-influent"):
        assert sub in res.stdout


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2
