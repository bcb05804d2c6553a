import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from nccodesign import __version__
from nccodesign.cli import main
from nccodesign.model import DesignConfig, dump_json

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
PLANT = str(CONFIGS / "plant_unstable.json")
LINK = str(CONFIGS / "single_link.json")


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_schedule_unconstrained(tmp_path, capsys):
    code, out, _ = run(["schedule", LINK, "--deadline-slots", "1", "--unconstrained",
                        "--out", str(tmp_path / "p.json")], capsys)
    assert code == 0
    line = json.loads(out)
    assert line["rho_star"] == pytest.approx(0.8)
    assert json.loads((tmp_path / "p.json").read_text())["policy1"] == [[2], ["HOLD"]]


def test_schedule_constrained(tmp_path, capsys):
    code, out, _ = run(["schedule", LINK, "--deadline-slots", "2", "--c-req", "1.1",
                        "--out", str(tmp_path / "p.json")], capsys)
    line = json.loads(out)
    assert code == 0
    assert line["theta2"] == pytest.approx(0.5)
    assert line["rho_star"] == pytest.approx(0.88)
    assert set(line) >= {"C1", "C2", "theta1", "delta_star"}


def test_missing_file_exit_code(tmp_path, capsys):
    missing = str(tmp_path / "absent.json")
    code, _, err = run(["schedule", missing, "--deadline-slots", "1", "--unconstrained",
                        "--out", str(tmp_path / "p.json")], capsys)
    assert code == 2 and missing in err
    assert not (tmp_path / "p.json").exists()


def test_invalid_input_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nodes": 2, "slot_ms": 10, "links": [
        {"from": 1, "to": 2, "p_loss": 1.0}]}))
    code, _, err = run(["schedule", str(bad), "--deadline-slots", "1", "--unconstrained",
                        "--out", str(tmp_path / "p.json")], capsys)
    assert code == 1 and "p_loss" in err


def _design(tmp_path, **kw):
    path = tmp_path / "design.json"
    dump_json(DesignConfig(**kw), path)
    return str(path)


def test_sweep_single_link(tmp_path, capsys):
    design = _design(tmp_path, h_grid=(10.0, 20.0))
    out = tmp_path / "s.csv"
    code, _, _ = run(["sweep", PLANT, LINK, design, "--out", str(out), "--threads", "1"], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["D"] for r in rows] == ["1", "2"]
    assert float(rows[1]["rho_star"]) == pytest.approx(0.96)
    assert rows[0]["J_mc_mean"] == "nan"


def test_sweep_with_simulation(tmp_path, capsys):
    design = _design(tmp_path, h_grid=(20.0,), horizon_s=2.0, mc_replicates=50)
    out = tmp_path / "s.csv"
    code, _, _ = run(["sweep", PLANT, LINK, design, "--out", str(out), "--threads", "1",
                      "--simulate", "--seed", "3", "--mode", "slot-level"], capsys)
    assert code == 0
    row = next(csv.DictReader(open(out)))
    assert float(row["J_min"]) <= float(row["J_mc_mean"]) <= float(row["J_max"])


def test_frontier_command(tmp_path, capsys):
    design = _design(tmp_path, h_grid=(10.0, 20.0, 30.0))
    out = tmp_path / "f.csv"
    code, _, _ = run(["frontier", PLANT, LINK, design, "--epsilon-grid", "0.05, 0.1,inf",
                      "--out", str(out), "--threads", "1"], capsys)
    assert code == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["epsilon_per_ms"] for r in rows] == ["0.05", "0.1", "inf"]
    js = [float(r["J_opt"]) for r in rows]
    assert js == sorted(js, reverse=True)


@pytest.mark.parametrize("mode", ["slot", "bernoulli"])
def test_simulate_command(tmp_path, capsys, mode):
    out = tmp_path / "r.json"
    code, _, _ = run(["simulate", PLANT, LINK, "--h-ms", "10", "--horizon-s", "2",
                      "--replicates", "40", "--seed", "1", "--mode", mode, "--out", str(out),
                      "--csv", str(tmp_path / "r.csv"), "--per-replicate"], capsys)
    assert code == 0
    data = json.loads(out.read_text())
    assert data["replicates"] == 40 and data["n_steps"] == 200
    assert abs(data["rho_empirical"] - 0.8) < 0.05
    assert len(list(csv.reader(open(tmp_path / "r.csv")))) == 41


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "nccodesign.cli", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "schema" in res.stdout
