"""Matplotlib rendering of evaluation curves and training logs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import FPPI_REFERENCES, EvalReport


def plot_report(report: EvalReport, path: str | Path) -> Path:
    """Render miss rate vs FPPI (log-log) for every subset in the report."""
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    for res in report.results.values():
        fppi = [pt.fppi for pt in res.curve]
        miss = [max(pt.miss_rate, 1e-5) for pt in res.curve]
        (line,) = ax.plot(
            [max(f, 1e-3) for f in fppi],
            miss,
            drawstyle="steps-post",
            label=f"{res.subset}: {100.0 * res.mr2:.2f}%",
        )
        refs = [max(r, 1e-3) for r, _ in res.reference_miss_rates]
        ref_mr = [max(m, 1e-5) for _, m in res.reference_miss_rates]
        ax.plot(refs, ref_mr, "o", color=line.get_color(), markersize=3)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlim(min(FPPI_REFERENCES) / 2.0, 10.0)
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("miss rate")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_loss_log(rows, path: str | Path) -> Path:
    """Render the per-iteration loss terms from a training log."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    iters = [r.iteration for r in rows]
    ax.plot(iters, [r.combined for r in rows], label="combined")
    ax.plot(iters, [r.detection for r in rows], label="detection")
    ax.plot(iters, [r.vls for r in rows], label="vls")
    ax.plot(iters, [r.psc for r in rows], label="psc")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)
