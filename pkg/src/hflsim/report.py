"""Figure rendering for completed runs.

Reads metrics CSV files (plus their summary sidecars when present) and
writes PNG figures and a combined summary CSV into the report directory:
accuracy and cumulative traffic per round, the privacy-loss trajectory,
and an overhead-to-target bar chart.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import read_metrics, read_summary
from .orchestrator import overhead_to_target


def _label_for(path: Path) -> str:
    sidecar = path.with_name(path.name + ".summary")
    if sidecar.is_file():
        summary = read_summary(sidecar)
        if "method" in summary and "seed" in summary:
            return f"{summary['method']} seed={summary['seed']}"
    return path.stem


def render_report(metrics_paths, out_dir, target: float | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for raw in metrics_paths:
        path = Path(raw)
        series = read_metrics(path)
        sidecar = path.with_name(path.name + ".summary")
        summary = read_summary(sidecar) if sidecar.is_file() else {}
        runs.append((path, _label_for(path), series, summary))

    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for _, label, series, _ in runs:
        ax.plot([m.round for m in series], [m.accuracy for m in series], label=label)
    ax.set_xlabel("round")
    ax.set_ylabel("test accuracy")
    ax.set_title("Accuracy per round")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    path = out / "accuracy_vs_round.png"
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for _, label, series, _ in runs:
        cum = []
        total = 0
        for m in series:
            total += m.uplink_scalars + m.downlink_scalars
            cum.append(total)
        ax.plot([m.round for m in series], cum, label=label)
    ax.set_xlabel("round")
    ax.set_ylabel("cumulative transmitted scalars")
    ax.set_yscale("log")
    ax.set_title("Communication per round")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    path = out / "communication_vs_round.png"
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    if any(math.isfinite(m.epsilon) for _, _, series, _ in runs for m in series):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for _, label, series, _ in runs:
            finite = [(m.round, m.epsilon) for m in series if math.isfinite(m.epsilon)]
            if finite:
                ax.plot([r for r, _ in finite], [e for _, e in finite], label=label)
        ax.set_xlabel("round")
        ax.set_ylabel("cumulative epsilon")
        ax.set_title("Privacy loss per round")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        path = out / "epsilon_vs_round.png"
        fig.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    labels, overheads = [], []
    for _, label, series, summary in runs:
        tgt = target if target is not None else float(summary.get("target_accuracy", 0.8))
        window = int(summary.get("window", 10))
        reached = overhead_to_target(series, tgt, window)
        labels.append(label)
        overheads.append(reached[1] if reached else 0)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    bars = ax.bar(range(len(labels)), overheads)
    for idx, (bar, value) in enumerate(zip(bars, overheads)):
        if value == 0:
            ax.text(idx, 0, "not reached", ha="center", va="bottom", rotation=90, fontsize=8)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("scalars to reach target")
    ax.set_title("Overhead to target accuracy")
    path = out / "overhead_to_target.png"
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    table = out / "combined_summary.csv"
    with open(table, "w", encoding="utf-8") as fh:
        fh.write("file,label,final_accuracy,final_window_accuracy,overhead_scalars,final_epsilon\n")
        for path_, label, series, summary in runs:
            fwa = summary.get("final_window_accuracy", "")
            overhead = summary.get("overhead_scalars", "")
            fh.write(
                f"{path_.name},{label},{series[-1].accuracy!r},{fwa},{overhead},{series[-1].epsilon!r}\n"
            )
    written.append(table)
    return written
