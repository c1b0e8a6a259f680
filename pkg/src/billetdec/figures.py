"""Figure rendering for evaluation reports.

Each helper takes the already-computed report objects and writes one PNG,
so the CSV outputs and the figures always describe the same run.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # headless: render straight to files

import matplotlib.pyplot as plt

from .harness import EntropyErrorReport, EvalReport
from .tta import TrajectoryRecord

_FIGSIZE = (6.4, 4.0)


def _bar_axes(title: str, xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, axis="y", alpha=0.3)
    return fig, ax


def save_ablation_figure(reports: list[EvalReport], path: str | Path) -> None:
    """Exact-match accuracy per method cell as a bar chart."""
    fig, ax = _bar_axes("Method comparison", "", "exact-match accuracy")
    labels = [r.label.replace("_", "\n") for r in reports]
    values = [r.exact_match for r in reports]
    bars = ax.bar(labels, values, color="#4878a8")
    for bar, v in zip(bars, values):
        ax.annotate(
            f"{v:.3f}",
            (bar.get_x() + bar.get_width() / 2, v),
            ha="center",
            va="bottom",
            fontsize=9,
        )
    ax.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_entropy_error_figure(report: EntropyErrorReport, path: str | Path) -> None:
    """Error rate per entropy bin; bin centers on the x axis."""
    fig, ax = _bar_axes(
        "Prediction entropy vs decode errors", "mean frame entropy (nats)", "error rate"
    )
    centers = [(b.lower + b.upper) / 2 for b in report.bins]
    width = (
        (report.bins[0].upper - report.bins[0].lower) * 0.9 if report.bins else 0.1
    )
    ax.bar(centers, [b.error_rate for b in report.bins], width=width, color="#a85048")
    ax.set_ylim(0.0, 1.05)
    ax.annotate(
        f"rank correlation {report.rank_correlation:.3f}",
        xy=(0.02, 0.95),
        xycoords="axes fraction",
        fontsize=9,
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trajectory_figure(
    records: list[TrajectoryRecord], path: str | Path
) -> None:
    """Mean batch entropy (and accuracy when logged) over the adaptation
    stream."""
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.set_title("Adaptation trajectory")
    ax.set_xlabel("batch")
    ax.set_ylabel("mean entropy (nats)")
    ax.grid(True, alpha=0.3)
    xs = [r.batch_index for r in records]
    ax.plot(xs, [r.mean_entropy for r in records], marker="o", color="#4878a8")
    accs = [r.accuracy for r in records]
    if any(a is not None for a in accs):
        ax2 = ax.twinx()
        ax2.set_ylabel("batch exact match")
        ax2.set_ylim(0.0, 1.05)
        ax2.plot(
            xs,
            [a if a is not None else float("nan") for a in accs],
            marker="s",
            color="#558855",
            alpha=0.8,
        )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
