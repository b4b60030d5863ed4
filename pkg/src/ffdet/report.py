"""Figures and delimited exports written next to evaluation and ablation outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402

# no Software/date chunks, so re-rendering the same data gives the same bytes
_PNG_META = {"Software": None}


def sibling(path, suffix: str) -> Path:
    """``out/report.json`` + ``.pr.csv`` -> ``out/report.pr.csv``."""
    p = Path(path)
    return p.with_name(p.stem + suffix)


def write_pr_csv(report: EvalReport, path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("score", "precision", "recall"))
        w.writerows(report.pr_curve)
    return Path(path)


def plot_pr_curve(report: EvalReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.0), dpi=100)
    if report.pr_curve:
        pts = np.asarray(report.pr_curve)
        ax.plot(pts[:, 2], pts[:, 1], lw=1.5)
    ax.set_xlim(0, 1.0)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"AP@{report.iou_thresh:g} = {report.ap:.3f}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_ablation(summary: list[dict], path) -> Path:
    """Grouped bars of median AP (overall and per bucket) for each variant."""
    keys = ("ap", "ap_small", "ap_medium", "ap_large")
    names = [row["variant"] for row in summary]
    x = np.arange(len(names))
    width = 0.8 / len(keys)
    fig, ax = plt.subplots(figsize=(max(4.5, 1.4 * len(names) + 1.5), 4.0), dpi=100)
    for i, k in enumerate(keys):
        ax.bar(x + (i - (len(keys) - 1) / 2) * width, [row[k] for row in summary], width, label=k)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("median AP over seeds")
    ax.legend(fontsize=8, ncol=2)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return Path(path)
