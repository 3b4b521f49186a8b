"""Matplotlib renderings of the aggregate results.

One figure per scenario shows the final DC bus voltages across control
modes (grouped bars around the rated value), plus one comparison chart
each for final cost and voltage deviation.  Files are written as PNG
next to the delimited outputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .report import MODE_LABELS, RunMatrix  # noqa: E402

_COLORS = {
    "active_power": "#8da0cb",
    "adaptive_droop": "#fc8d62",
    "proposed_droop": "#66c2a5",
}


def _style(ax):
    ax.grid(True, alpha=0.3, axis="y")
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)


def dc_voltage_figures(matrix: RunMatrix, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    buses = [b.id for b in matrix.case.dc_buses]
    modes = matrix.modes()
    for scen in matrix.scenarios:
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        width = 0.8 / max(len(modes), 1)
        for j, mode in enumerate(modes):
            rep = matrix.reports.get((scen.name, mode))
            if rep is None:
                continue
            voltages = rep.final_stage.dc_voltages()
            xs = [i + (j - (len(modes) - 1) / 2) * width
                  for i in range(len(buses))]
            ys = [voltages.get(b, float("nan")) for b in buses]
            ax.bar(xs, ys, width=width, label=MODE_LABELS.get(mode, mode),
                   color=_COLORS.get(mode))
        ax.axhline(1.0, color="k", linewidth=0.8, linestyle="--")
        ax.set_xticks(range(len(buses)))
        ax.set_xticklabels([f"dc {b}" for b in buses])
        ax.set_ylabel("DC voltage (pu)")
        lo = min(b.v_min for b in matrix.case.dc_buses) if buses else 0.9
        hi = max(b.v_max for b in matrix.case.dc_buses) if buses else 1.1
        ax.set_ylim(lo - 0.01, hi + 0.01)
        ax.set_title(f"DC voltage set points: {scen.name}")
        ax.legend(fontsize=8)
        _style(ax)
        fig.tight_layout()
        safe = scen.name.replace(" ", "_").replace("/", "_")
        path = out / f"dc_voltage_{safe}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written


def _comparison_figure(matrix: RunMatrix, out_dir, metric, label, fname):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modes = matrix.modes()
    names = [s.name for s in matrix.scenarios]
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    width = 0.8 / max(len(modes), 1)
    for j, mode in enumerate(modes):
        xs = [i + (j - (len(modes) - 1) / 2) * width
              for i in range(len(names))]
        ys = []
        for scen in matrix.scenarios:
            rep = matrix.reports.get((scen.name, mode))
            ys.append(metric(rep) if rep is not None else float("nan"))
        ax.bar(xs, ys, width=width, label=MODE_LABELS.get(mode, mode),
               color=_COLORS.get(mode))
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel(label)
    ax.set_title(label + " by scenario and control mode")
    ax.legend(fontsize=8)
    _style(ax)
    fig.tight_layout()
    path = Path(out_dir) / fname
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_figures(matrix: RunMatrix, out_dir) -> list[Path]:
    """All report figures; returns the written paths."""
    written = list(dc_voltage_figures(matrix, out_dir))
    written.append(_comparison_figure(
        matrix, out_dir, lambda r: r.final_cost, "Generation cost",
        "objective_comparison.png"))
    written.append(_comparison_figure(
        matrix, out_dir, lambda r: r.final_vdev, "Voltage deviation (pu^2)",
        "vdev_comparison.png"))
    return written
