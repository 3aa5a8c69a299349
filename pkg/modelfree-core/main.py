import sys
import json
import math
import logging
import argparse
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from settings import settings
from core import ControllerKind, Gains, InvalidGainsError, ScenarioError, load_scenario
from margins import (FrequencyDomainError, OpenLoopTF, crossover_summary, delay_margin, delay_margin_iP,
                     margins, nyquist_sample)
from harness import (PRESETS, RunResult, delay_sweep, error_dynamics_delay_sweep, load_preset, run_scenario,
                     scenario_variant, stability_boundary)
from reporter import EmissionError, emit_nyquist_csv, emit_plot, emit_trace

load_dotenv()

# Setup Logging
logging.basicConfig(
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    level=getattr(logging, settings.log_level, logging.INFO),
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3


def _json_number(value):
    if isinstance(value, float) and math.isinf(value):
        return "+inf"
    return value


def _open_loop(args) -> OpenLoopTF:
    kind = ControllerKind.parse(args.controller)
    gains = Gains.build(args.kp, ki=args.ki, kd=args.kd, alpha=args.alpha)
    if gains.kind != kind:
        raise InvalidGainsError(f"gains (kp={args.kp}, ki={args.ki}, kd={args.kd}) describe "
                                f"{gains.kind.value}, not {kind.value}")
    return OpenLoopTF(kind=kind, gains=gains, delay=args.delay)


def cmd_margins(args) -> int:
    tf = _open_loop(args)
    report = margins(tf)
    summary = crossover_summary(report)
    summary["controller"] = tf.kind.value
    summary["delay"] = tf.delay
    if tf.delay == 0:
        summary["delay_margin"] = _json_number(delay_margin(tf))
    if args.json:
        print(json.dumps(summary, indent=2))
        return EXIT_OK
    print(f"{tf.kind.value}  kp={tf.gains.kp} ki={tf.gains.ki} kd={tf.gains.kd} delay={tf.delay}")
    print(f"  gain margin   : {summary['gain_margin']} ({summary['gain_margin_db']} dB)")
    print(f"  phase margin  : {summary['phase_margin_deg']} deg")
    print(f"  omega_m       : {summary['omega_gain_crossover']} rad/s")
    print(f"  omega_pi      : {summary['omega_phase_crossover']} rad/s")
    if "delay_margin" in summary:
        print(f"  delay margin  : {summary['delay_margin']} s")
    if report.note:
        print(f"  note          : {report.note}")
    return EXIT_OK


def cmd_delay_margin(args) -> int:
    print(repr(delay_margin_iP(args.kp)))
    return EXIT_OK


def cmd_nyquist(args) -> int:
    tf = _open_loop(args)
    rows = nyquist_sample(tf, args.omega_min, args.omega_max, args.points)
    emit_nyquist_csv(rows, args.out)
    if args.plot:
        emit_plot(rows, args.plot)
    return EXIT_OK


def _report_run(result: RunResult, out_dir: Path, stem: str, plot: bool) -> int:
    emit_trace(result, out_dir / f"{stem}.csv")
    if plot:
        emit_plot(result, out_dir / f"{stem}.svg")
    print(f"{stem}: stable={result.stable} tracking_rmse={result.tracking_rmse:.6g} "
          f"relative_tracking={result.relative_tracking:.4g} estimation_rmse={result.estimation_rmse:.6g}"
          + (f" diverged_at={result.diverged_at:.3f}" if result.diverged_at is not None else ""))
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    stem = Path(args.scenario).stem
    result = run_scenario(scenario, name=stem)
    return _report_run(result, Path(args.out or settings.out_dir), stem, not args.no_plot)


def cmd_reproduce(args) -> int:
    scenario = load_preset(args.figure)
    if args.seed is not None:
        scenario = scenario_variant(scenario, seed=args.seed)
    logger.info(f"Reproducing preset {args.figure}")
    result = run_scenario(scenario, name=args.figure)
    return _report_run(result, Path(args.out or settings.out_dir), args.figure, not args.no_plot)


def _tau_grid(tau_min: float, tau_max: float, step: float) -> List[float]:
    if not step > 0:
        raise ScenarioError(f"step must be positive, got {step}", keys=["step"])
    if tau_min < 0 or tau_max < tau_min:
        raise ScenarioError(f"need 0 <= tau-min <= tau-max, got [{tau_min}, {tau_max}]", keys=["tau"])
    n = int(math.floor((tau_max - tau_min) / step + 1e-9)) + 1
    return [round(tau_min + i * step, 12) for i in range(n)]


def cmd_sweep_delay(args) -> int:
    taus = _tau_grid(args.tau_min, args.tau_max, args.step)
    if args.ideal:
        points = error_dynamics_delay_sweep(args.kp, taus)
        for tau, stable in points:
            print(f"{tau:.4f}  stable={stable}")
    else:
        points = delay_sweep(args.kp, taus)
        for tau, stable, rmse in points:
            print(f"{tau:.4f}  stable={stable}  tracking_rmse={rmse:.6g}")
    last_stable, first_unstable = stability_boundary(points)
    print(f"boundary between {last_stable} and {first_unstable} s "
          f"(closed-form delay margin {delay_margin_iP(args.kp):.6g} s)")
    return EXIT_OK


def _add_gain_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--controller", required=True, help="ip, ipi, ipd or ipid")
    p.add_argument("--kp", type=float, required=True)
    p.add_argument("--ki", type=float, default=0.0)
    p.add_argument("--kd", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--delay", type=float, default=0.0, help="input delay in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modelfree-lab",
                                     description="Model-free control: margins, estimator and closed-loop runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("margins", help="gain/phase margins of an intelligent controller loop")
    _add_gain_args(p)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_margins)

    p = sub.add_parser("delay-margin", help="largest stable input delay of an iP loop")
    p.add_argument("--kp", type=float, required=True)
    p.set_defaults(func=cmd_delay_margin)

    p = sub.add_parser("nyquist", help="frequency response CSV (and optional SVG)")
    _add_gain_args(p)
    p.add_argument("--omega-min", type=float, default=1e-2)
    p.add_argument("--omega-max", type=float, default=1e2)
    p.add_argument("--points", type=int, default=500)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--plot", help="SVG path")
    p.set_defaults(func=cmd_nyquist)

    p = sub.add_parser("simulate", help="run a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reproduce", help="run a bundled preset")
    p.add_argument("figure", choices=PRESETS)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("sweep-delay", help="closed-loop stability versus transmission delay")
    p.add_argument("--kp", type=float, required=True)
    p.add_argument("--tau-min", type=float, required=True)
    p.add_argument("--tau-max", type=float, required=True)
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--ideal", action="store_true", help="sweep the ideal error dynamics instead of the plant")
    p.set_defaults(func=cmd_sweep_delay)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, InvalidGainsError, FrequencyDomainError, ValueError) as e:
        logger.error(f"Validation error: {e}")
        return EXIT_VALIDATION
    except (EmissionError, OSError) as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
