"""Fit-report output: line-delimited step records, a summary document and
loss-curve figures rendered alongside them."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .optimize import FitReport


def report_paths(out_dir, stem: str = "fit") -> Dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "trace": out_dir / f"{stem}_trace.jsonl",
        "summary": out_dir / f"{stem}_summary.json",
        "figure": out_dir / f"{stem}_loss.png",
    }


def summary_dict(report: FitReport) -> dict:
    return {
        "stage": report.stage,
        "steps": report.steps,
        "wall_clock_seconds": report.wall_clock_seconds,
        "final_metrics": report.final_metrics,
        "parameter_counts": {
            name: {"scalars": c.scalars, "bytes": c.bytes, "mib": c.mib}
            for name, c in report.parameter_counts.items()
        },
    }


def write_report(report: FitReport, out_dir, stem: str = "fit") -> Dict[str, Path]:
    """Write trace (JSONL), summary (JSON) and the loss-curve PNG.

    Returns the paths written, keyed trace/summary/figure.
    """
    paths = report_paths(out_dir, stem)
    paths["trace"].parent.mkdir(parents=True, exist_ok=True)

    with open(paths["trace"], "w") as f:
        for record in report.loss_trace:
            f.write(json.dumps(record) + "\n")

    with open(paths["summary"], "w") as f:
        json.dump(summary_dict(report), f, indent=2)
        f.write("\n")

    steps = [r["step"] for r in report.loss_trace]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, [r["total"] for r in report.loss_trace], label="total", lw=2)
    for name in sorted(k for k in report.loss_trace[0] if k not in ("step", "lr", "total")):
        ax.plot(steps, [r[name] for r in report.loss_trace], label=name, lw=1, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"stage {report.stage} fit ({report.steps} steps)")
    if all(r["total"] > 0 for r in report.loss_trace):
        ax.set_yscale("log")
    ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(paths["figure"], dpi=110)
    plt.close(fig)
    return paths
