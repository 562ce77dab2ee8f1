"""PNG figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pricing import FbpCurve, GpuCatalog  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_curve(curve: FbpCurve, catalog: GpuCatalog | None, path, tbp: bool = True) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [0.0] + curve.breakpoints
    ax.plot(xs, [curve.base] + curve.caps, marker="o", label=f"FBP {curve}")
    if catalog is not None:
        for g in catalog:
            ax.axvline(g.bw_max, color="0.8", lw=0.8, zorder=0)
            if tbp:
                ax.scatter([g.bw_max], [g.ppt], marker="x", color="C3")
                ax.annotate(g.name, (g.bw_max, g.ppt), textcoords="offset points", xytext=(4, -12), fontsize=8)
    ax.set_xlabel("memory bandwidth (TB/s)")
    ax.set_ylabel("price ($/h)")
    ax.legend(loc="upper left")
    return _save(fig, path)


def plot_revenue(report, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(report.mean_tbp)
    vals = [report.mean_tbp[n] for n in names]
    ax.bar(names, vals, color="0.6", label="TBP")
    ax.bar([f"FBP\n({report.reference_gpu})"], [report.mean_fbp], color="C0", label=f"FBP {report.curve}")
    ax.set_ylabel("mean price per job ($)")
    ax.set_title(f"{report.n_jobs} jobs, F% = {report.f_percent:.2f}")
    ax.legend()
    return _save(fig, path)


def plot_sweep(rows: Sequence, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r.period_us for r in rows], [r.percent_error for r in rows], marker="o")
    ax.axhline(0, color="0.5", lw=0.8)
    ax.set_xlabel("sampling period (µs)")
    ax.set_ylabel("error vs ideal price (%)")
    return _save(fig, path)


def plot_latency(arrivals: Sequence, path) -> Path:
    groups: dict[str, list[float]] = {}
    for a in arrivals:
        groups.setdefault(a.run_label or "run", []).append(a.latency / 1000.0)
    labels = sorted(groups)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([np.asarray(groups[k]) for k in labels], showfliers=False)
    ax.set_xticks(range(1, len(labels) + 1), labels)
    ax.set_ylabel("log latency (ms)")
    return _save(fig, path)
