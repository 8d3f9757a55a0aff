"""Figure rendering for collection results.

Renders PNGs next to the delimited output: a power-over-time trace per node
and a per-node energy bar chart. Uses the Agg canvas directly so no display
or global pyplot state is involved, which keeps rendering safe from worker
threads and headless machines.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from rackbench.collector import EnergyReport, NodeSeries, power_w

# beyond this many nodes the legend is clutter, not information
LEGEND_LIMIT = 16


def render_power_figure(series_map: Mapping[str, NodeSeries], path: str | Path) -> Path:
    """Line plot of instantaneous power per node over agent-relative time."""
    fig = Figure(figsize=(10, 6))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)

    plotted = 0
    for series in sorted(series_map.values(), key=lambda s: s.label):
        pts = series.samples
        if not pts:
            continue
        t0 = pts[0].timestamp_us
        xs = [(p.timestamp_us - t0) * 1e-6 for p in pts]
        ys = [power_w(p) for p in pts]
        ax.plot(xs, ys, linewidth=0.9, label=series.label)
        plotted += 1

    ax.set_xlabel("time since first sample (s)")
    ax.set_ylabel("power (W)")
    ax.set_title(f"node power, {plotted} nodes")
    ax.grid(True, alpha=0.3)
    if 0 < plotted <= LEGEND_LIMIT:
        ax.legend(loc="upper right", fontsize="small")
    out = Path(path)
    fig.savefig(out, dpi=100)
    return out


def render_energy_figure(report: EnergyReport, path: str | Path) -> Path:
    """Bar chart of per-node energy; warned rows (too few samples) hatched."""
    fig = Figure(figsize=(max(6, 0.25 * len(report.rows) + 2), 5))
    FigureCanvasAgg(fig)
    ax = fig.add_subplot(111)

    labels = [r.node for r in report.rows]
    values = [r.energy_J for r in report.rows]
    hatches = ["//" if r.warning else "" for r in report.rows]
    bars = ax.bar(range(len(labels)), values)
    for bar, hatch in zip(bars, hatches):
        bar.set_hatch(hatch)

    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=90, fontsize="x-small")
    ax.set_ylabel("energy (J)")
    ax.set_title(f"energy per node, total {report.total_energy_J:.2f} J")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=100)
    return out


def render_figures(series_map: Mapping[str, NodeSeries], report: EnergyReport,
                   out_stem: str | Path) -> list[Path]:
    """Render both figures as <stem>_power.png and <stem>_energy.png."""
    stem = Path(out_stem)
    return [
        render_power_figure(series_map, stem.with_name(stem.name + "_power.png")),
        render_energy_figure(report, stem.with_name(stem.name + "_energy.png")),
    ]
