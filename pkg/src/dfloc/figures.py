"""Static figure rendering for evaluation reports.

Renders PNG files alongside the delimited report output; nothing here is
interactive and nothing else in the package imports matplotlib.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvaluationReport


def render_report_figures(report: EvaluationReport, outdir: str | Path) -> list[Path]:
    """Write the report's standard figures; returns the created paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = [m for m in report.methods if m.error is None]
    written: list[Path] = []
    if not rows:
        return written

    # Median error per method
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [m.method for m in rows]
    medians = [m.median_error_m if m.median_error_m is not None else 0.0 for m in rows]
    ax.bar(labels, medians, color="tab:blue")
    ax.set_ylabel("median error (m)")
    ax.set_title("Median localization error")
    fig.tight_layout()
    path = outdir / "median_error.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    # Error CDF per method
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = False
    for m in rows:
        if m.errors.size == 0:
            continue
        errs = np.sort(m.errors)
        cdf = np.arange(1, errs.size + 1) / errs.size
        ax.step(errs, cdf, where="post", label=m.method)
        plotted = True
    if plotted:
        ax.set_xlabel("error (m)")
        ax.set_ylabel("fraction of frames")
        ax.set_ylim(0, 1.02)
        ax.set_title("Error distribution")
        ax.legend()
        fig.tight_layout()
        path = outdir / "error_cdf.png"
        fig.savefig(path, dpi=120)
        written.append(path)
    plt.close(fig)

    # Detection rates per method
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(rows))
    md = [m.missed_detection_pct if m.missed_detection_pct is not None else 0.0 for m in rows]
    fa = [m.false_alarm_pct if m.false_alarm_pct is not None else 0.0 for m in rows]
    width = 0.38
    ax.bar(x - width / 2, md, width, label="missed detection %")
    ax.bar(x + width / 2, fa, width, label="false alarm %")
    ax.set_xticks(x, labels)
    ax.set_ylabel("percent of frames")
    ax.set_title("Detection errors")
    ax.legend()
    fig.tight_layout()
    path = outdir / "detection_rates.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written
