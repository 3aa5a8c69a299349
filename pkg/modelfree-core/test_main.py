import os
import sys
import json
import math

import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from core import TRACE_FIELDS, Gains
from harness import load_preset, run_scenario, scenario_variant
from margins import OpenLoopTF, nyquist_sample
from reporter import EmissionError, emit_nyquist_csv, emit_plot, emit_trace
import main


def test_margins_json(capsys):
    assert main.main(["margins", "--controller", "ipi", "--kp", "1", "--ki", "1", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["phase_margin_deg"] == pytest.approx(51.83, abs=0.01)
    assert out["gain_margin"] == "+inf"
    assert out["controller"] == "iPI"


def test_margins_of_delayed_loop(capsys):
    assert main.main(["margins", "--controller", "ip", "--kp", "1", "--delay", str(math.pi / 2), "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["phase_margin_deg"] == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("argv", [
    ["margins", "--controller", "ipi", "--kp", "1"],
    ["margins", "--controller", "ip", "--kp", "-1"],
    ["margins", "--controller", "pid", "--kp", "1"],
    ["nyquist", "--controller", "ip", "--kp", "1", "--omega-min", "10", "--omega-max", "1", "--out", "x.csv"],
    ["sweep-delay", "--kp", "1", "--tau-min", "0", "--tau-max", "1", "--step", "0"],
])
def test_validation_errors_exit_with_2(argv):
    assert main.main(argv) == 2


def test_argparse_errors_exit_with_2():
    with pytest.raises(SystemExit) as info:
        main.main(["margins", "--kp", "1"])
    assert info.value.code == 2


def test_delay_margin_command(capsys):
    assert main.main(["delay-margin", "--kp", "10"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(math.pi / 20)


def test_missing_scenario_file_exits_with_3(tmp_path):
    assert main.main(["simulate", "--scenario", str(tmp_path / "nope.yaml")]) == 3


def test_unwritable_output_exits_with_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    argv = ["nyquist", "--controller", "ip", "--kp", "1", "--out", str(blocker / "sub" / "n.csv")]
    assert main.main(argv) == 3


def test_nyquist_command_writes_csv_and_plot(tmp_path):
    csv_path, svg_path = tmp_path / "n.csv", tmp_path / "n.svg"
    argv = ["nyquist", "--controller", "ipid", "--kp", "4", "--ki", "2", "--kd", "3", "--points", "20",
            "--out", str(csv_path), "--plot", str(svg_path)]
    assert main.main(argv) == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "omega,re,im,gain_db,phase_deg"
    assert len(lines) == 21
    assert svg_path.stat().st_size > 0


def test_reproduce_is_deterministic(tmp_path):
    for out in ("a", "b"):
        assert main.main(["reproduce", "fig4", "--out", str(tmp_path / out), "--seed", "3", "--no-plot"]) == 0
    first = (tmp_path / "a" / "fig4.csv").read_bytes()
    assert first == (tmp_path / "b" / "fig4.csv").read_bytes()
    assert first.splitlines()[0] == b"t,setpoint,y_star,y,u,f_true,f_est,e"


def test_simulate_writes_trace_and_plot(tmp_path):
    scenario = tmp_path / "short.yaml"
    scenario.write_text("plant: linear\ncontroller: iP\nkp: 1\nsample_period: 0.01\n"
                        "estimator_window: 0.05\nduration: 1\n", encoding="utf-8")
    assert main.main(["simulate", "--scenario", str(scenario), "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "short.csv").exists()
    assert (tmp_path / "out" / "short.svg").stat().st_size > 0


def test_emit_trace_full_precision(tmp_path):
    result = run_scenario(scenario_variant(load_preset("fig1"), duration=0.5), name="fig1")
    path = emit_trace(result, tmp_path / "trace.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(TRACE_FIELDS)
    assert len(lines) == len(result.trace) + 1
    row = result.trace[-1]
    assert [float(v) for v in lines[-1].split(",")] == [getattr(row, name) for name in TRACE_FIELDS]


def test_emit_plot_for_a_run(tmp_path):
    result = run_scenario(scenario_variant(load_preset("fig1"), duration=1.0), name="fig1")
    path = emit_plot(result, tmp_path / "fig1.svg")
    text = path.read_text()
    assert path.stat().st_size > 0
    for title in ("Control", "Setpoint, Reference and Output", "F and F_est"):
        assert title in text


def test_emission_error_carries_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    gains = Gains.build(1.0)
    rows = nyquist_sample(OpenLoopTF(kind=gains.kind, gains=gains), 0.1, 10.0, 5)
    with pytest.raises(EmissionError) as info:
        emit_nyquist_csv(rows, blocker / "n.csv")
    assert info.value.path == blocker / "n.csv"


def test_simulating_a_second_order_controller_exits_with_2(tmp_path):
    scenario = tmp_path / "ipd.yaml"
    scenario.write_text("plant: linear\ncontroller: iPD\nkp: 4\nkd: 4\nsample_period: 0.01\n"
                        "estimator_window: 0.2\nduration: 1\n", encoding="utf-8")
    assert main.main(["simulate", "--scenario", str(scenario), "--out", str(tmp_path / "out")]) == 2
