import json
import subprocess
import sys

import pytest

from wellfusion import config
from wellfusion.cli import main

REF = str(config.data_path("reference_scenario.json"))
WELL = str(config.data_path("reference_well.json"))


def test_steady(tmp_path, capsys):
    out = tmp_path / "curve.csv"
    assert main(["steady", "--config", WELL, "--out", str(out), "--points", "11"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["constraints_ok"] and len(doc["layer_flows"]) == 3
    assert len(out.read_text().splitlines()) == 12


def test_simulate_and_compare(tmp_path, capsys):
    paths = []
    for kind in ("mpc", "fusion"):
        m = tmp_path / f"{kind}.json"
        assert main(["simulate", "--scenario", REF, "--out", str(tmp_path / f"{kind}.csv"), "--metrics", str(m),
                     "--controller", kind]) == 0
        paths.append(str(m))
    capsys.readouterr()
    assert main(["compare", "--reports", *paths, "--out", str(tmp_path / "cmp.json")]) == 0
    assert "sum_du" in capsys.readouterr().out
    assert set(json.loads((tmp_path / "cmp.json").read_text())["table"]) >= {"t_s", "sigma_p"}


def test_wavecode_outputs(tmp_path, capsys):
    stem = tmp_path / "wave"
    assert main(["wavecode", "--scenario", REF, "--bits", "1011", "--loop", "3", "--low", "3.0", "--high", "3.7",
                 "--period", "100", "--out", str(stem)]) == 0
    doc = json.loads((tmp_path / "wave_decode.json").read_text())
    assert doc["sent"] == "1011" and doc["decoded"] == "1011" and doc["ser"] == 0.0
    assert (tmp_path / "wave_schedule.csv").exists() and (tmp_path / "wave_trace.csv").exists()


def test_weights_single_sweep_is_fast_enough(tmp_path, monkeypatch):
    from wellfusion import weights

    calls = {}

    def fake(scn, step, base_weights, direction):
        calls.update(step=step, base=base_weights, direction=direction)
        ev = weights.loop_evaluator(scn, 1, horizon=100.0)
        return [weights.optimal_weight(ev, step=0.1)]

    monkeypatch.setattr(weights, "optimal_weights", fake)
    out = tmp_path / "w.json"
    assert main(["weights", "--scenario", REF, "--out", str(out), "--step", "0.02", "--unit-step",
                 "--sweep", str(tmp_path / "sweep.csv")]) == 0
    assert calls == {"step": 0.02, "base": None, "direction": None}
    assert len(json.loads(out.read_text())["weights"]) == 1


@pytest.mark.parametrize("argv", [
    ["steady", "--config", "/nonexistent.json", "--out", "x.csv"],
    ["simulate", "--scenario", REF],
    ["wavecode", "--scenario", REF, "--bits", "10a", "--low", "3", "--high", "3.7", "--period", "100",
     "--out", "w"],
    ["frobnicate"],
])
def test_config_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        sys.exit(main(argv))
    assert exc.value.code == 2


def test_divergence_exit_3(tmp_path):
    doc = config.read_json(REF)
    doc["pid"] = [{"proportional_Kp": -40.0, "integral_time_Ti": 0.5} for _ in doc["pid"]]
    doc["saturation"] = [-1e9, 1e9]
    doc["controller"] = {"type": "pid"}
    path = tmp_path / "wild.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    assert main(["simulate", "--scenario", str(path), "--out", str(tmp_path / "t.csv")]) == 3
    assert "# diverged" in (tmp_path / "t.csv").read_text()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "wellfusion", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "simulate" in res.stdout
