"""CSV + figure rendering for runs: loss curves, conditioning-time sweeps and
ablation tables. The CSV is the contract; the rendered image is a convenience."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

ABLATION_COLUMNS = ["variant", "direction", "metric", "score", "baseline_score", "seed"]


def plot_loss_curve(rows, png_path) -> None:
    steps = [r[0] for r in rows]
    losses = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_sweep(curve, png_path, metric_name: str = "alignment score") -> None:
    ts = [p[0] for p in curve]
    scores = [p[1] for p in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ts, scores, marker="o")
    ax.set_xlabel("conditioning flow time")
    ax.set_ylabel(metric_name)
    ax.set_title("conditioning-time sweep")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def write_ablation_csv(path, rows) -> None:
    """rows: dicts with the ABLATION_COLUMNS keys; schema is stable across runs."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in ABLATION_COLUMNS})


def plot_ablation(rows, png_path) -> None:
    labels = [f"{r['variant']}" for r in rows]
    scores = [float(r["score"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(labels)), scores)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("score")
    ax.set_title("injection / arrangement ablation")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
