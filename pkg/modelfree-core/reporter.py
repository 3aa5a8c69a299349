"""Trace, frequency-response and plot emission.

CSV files carry full-precision floats (repr) so that identical runs give
byte-identical files. Plots are SVG, drawn on standalone Figure objects so
sweeps may emit from worker threads.
"""

import csv
import logging
from pathlib import Path
from typing import Sequence, Union

import matplotlib
matplotlib.use("Agg")
from matplotlib.figure import Figure

from core import TRACE_FIELDS, ModelFreeError
from harness import RunResult
from margins import NYQUIST_FIELDS, NyquistRow

logger = logging.getLogger(__name__)

matplotlib.rcParams["svg.hashsalt"] = "modelfree-lab"
matplotlib.rcParams["svg.fonttype"] = "none"


class EmissionError(ModelFreeError):
    """Raised when an output file cannot be written."""
    def __init__(self, path, reason: str):
        self.path = Path(path)
        super().__init__(f"Could not write {self.path}: {reason}")


def _prepare(path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise EmissionError(path, str(e))
    return path


def _write_rows(path, header: Sequence[str], rows) -> Path:
    path = _prepare(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(float(v)) for v in row])
    except OSError as e:
        raise EmissionError(path, str(e))
    return path


def emit_trace(result: RunResult, path) -> Path:
    """CSV with header t,setpoint,y_star,y,u,f_true,f_est,e."""
    rows = ([getattr(r, name) for name in TRACE_FIELDS] for r in result.trace)
    path = _write_rows(path, TRACE_FIELDS, rows)
    logger.info(f"Trace of '{result.name}' ({len(result.trace)} rows) written to {path}")
    return path


def emit_nyquist_csv(rows: Sequence[NyquistRow], path) -> Path:
    path = _write_rows(path, NYQUIST_FIELDS, ([getattr(r, name) for name in NYQUIST_FIELDS] for r in rows))
    logger.info(f"Frequency response ({len(rows)} points) written to {path}")
    return path


def _trace_figure(result: RunResult) -> Figure:
    fig = Figure(figsize=(8, 9))
    ax_u, ax_y, ax_f = fig.subplots(3, 1, sharex=True)
    t = result.column("t")

    ax_u.plot(t, result.column("u"), color="tab:blue", linewidth=1.0)
    ax_u.set_title("Control")

    ax_y.plot(t, result.column("setpoint"), "k-.", linewidth=1.0, label="Setpoint")
    ax_y.plot(t, result.column("y_star"), "r--", linewidth=1.0, label="Reference")
    ax_y.plot(t, result.column("y"), color="tab:blue", linewidth=1.0, label="Output")
    ax_y.set_title("Setpoint, Reference and Output")
    ax_y.legend(loc="best")

    ax_f.plot(t, result.column("f_true"), "k--", linewidth=1.0, label="F")
    ax_f.plot(t, result.column("f_est"), color="tab:blue", linewidth=1.0, label="F_est")
    ax_f.set_title("F and F_est")
    ax_f.set_xlabel("Time (s)")
    ax_f.legend(loc="best")

    for ax in (ax_u, ax_y, ax_f):
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def _frequency_figure(rows: Sequence[NyquistRow]) -> Figure:
    fig = Figure(figsize=(11, 5))
    ax_nyq = fig.add_subplot(1, 2, 1)
    ax_mag = fig.add_subplot(2, 2, 2)
    ax_phase = fig.add_subplot(2, 2, 4, sharex=ax_mag)
    omega = [r.omega for r in rows]

    ax_nyq.plot([r.re for r in rows], [r.im for r in rows], color="tab:blue", linewidth=1.0)
    ax_nyq.plot([-1.0], [0.0], "r+", markersize=10)
    ax_nyq.set_title("Nyquist")
    ax_nyq.set_xlabel("Re")
    ax_nyq.set_ylabel("Im")

    ax_mag.semilogx(omega, [r.gain_db for r in rows], color="tab:blue", linewidth=1.0)
    ax_mag.axhline(0.0, color="k", linewidth=0.5)
    ax_mag.set_ylabel("Gain (dB)")
    ax_mag.set_title("Bode")

    ax_phase.semilogx(omega, [r.phase_deg for r in rows], color="tab:blue", linewidth=1.0)
    ax_phase.axhline(-180.0, color="k", linewidth=0.5)
    ax_phase.set_ylabel("Phase (deg)")
    ax_phase.set_xlabel("omega (rad/s)")

    for ax in (ax_nyq, ax_mag, ax_phase):
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def emit_plot(data: Union[RunResult, Sequence[NyquistRow]], path) -> Path:
    """SVG plot: three trace panels for a run, Nyquist plus Bode for frequency rows."""
    fig = _trace_figure(data) if isinstance(data, RunResult) else _frequency_figure(data)
    path = _prepare(path)
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as e:
        raise EmissionError(path, str(e))
    logger.info(f"Plot written to {path}")
    return path
