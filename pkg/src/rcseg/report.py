"""Run reports, iteration traces, delimited dumps, and figures.

Reports are JSON with a config echo sufficient to replay the run; traces are
JSON lines with one record per iteration. Whenever a report or table path is
written, a companion PNG figure is rendered next to it.
"""
from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .imageio import _atomic_write_bytes

ARTIFACT_VERSION = "0.1.0"


def write_json(obj: dict, path) -> None:
    _atomic_write_bytes(path, (json.dumps(obj, indent=2) + "\n").encode())


def trace_records(trace) -> list[dict]:
    return [{"iteration": r.iteration, "energy": r.energy, "moves": r.moves,
             "particles": r.particles, "mode": r.mode, "seconds": r.seconds}
            for r in trace]


def write_trace(trace, path) -> None:
    lines = [json.dumps(rec) for rec in trace_records(trace)]
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def build_report(result, config_echo: dict, input_path: str | None,
                 output_path: str | None) -> dict:
    per_iter = (result.wall_seconds / result.iterations
                if result.iterations else 0.0)
    return {
        "artifact_version": ARTIFACT_VERSION,
        "status": result.status,
        "iterations": result.iterations,
        "fallback_iteration": result.fallback_iteration,
        "wall_seconds": result.wall_seconds,
        "seconds_per_iteration": per_iter,
        "final_energy": {
            "total": result.final_energy.total,
            "external": result.final_energy.external,
            "internal": result.final_energy.internal,
        },
        "region_count": result.region_count,
        "input": input_path,
        "output": output_path,
        "config": config_echo,
    }


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def figure_path(path) -> str:
    base, _ = os.path.splitext(os.fspath(path))
    return base + ".png"


def render_energy_figure(traces: dict[str, list], path) -> None:
    """Energy-versus-iteration curves, one per labeled trace."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name, trace in traces.items():
        iters = [r.iteration for r in trace]
        energy = [r.energy for r in trace]
        ax.plot(iters, energy, label=name, linewidth=1.2)
        switches = [r.iteration for i, r in enumerate(trace)
                    if i and trace[i - 1].mode != r.mode]
        for s in switches:
            ax.axvline(s, color="gray", linestyle=":", linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total energy")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_kernel_figure(r: np.ndarray, values: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot(r, values, linewidth=1.4)
    ax.axhline(0.0, color="gray", linewidth=0.6)
    ax.set_xlabel("particle distance")
    ax.set_ylabel("kernel weight")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
