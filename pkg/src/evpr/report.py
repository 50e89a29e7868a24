"""Figure rendering for evaluation reports.

Every report-producing CLI path writes these PNGs next to its delimited
output: a distance-matrix heatmap, a Recall@K curve, and a per-query
rate histogram. Uses the Agg backend so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_distance_matrix_figure(similarity, path: str, title: str = "Distance matrix") -> None:
    """Heatmap of 1 - similarity, references on rows, queries on columns."""
    data = similarity.data if hasattr(similarity, "data") else np.asarray(similarity)
    dist = 1.0 - np.asarray(data, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(dist, aspect="auto", origin="upper", cmap="viridis")
    ax.set_xlabel("query frame")
    ax.set_ylabel("reference frame")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="cosine distance")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_recall_figure(report, path: str, title: str = "Recall@K") -> None:
    ks = sorted(report.per_k)
    values = [report.per_k[k] for k in ks]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ks, values, marker="o")
    ax.set_xlabel("K")
    ax.set_ylabel("recall")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(ks)
    ax.grid(True, alpha=0.3)
    ax.set_title(title)
    for k, v in zip(ks, values):
        ax.annotate(f"{v:.2f}", (k, v), textcoords="offset points",
                    xytext=(0, 6), ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_timing_figure(report, path: str, title: str = "Per-query rate") -> None:
    rows = report.measured() or report.per_query
    if not rows:
        rates = np.empty(0)
    else:
        rates = np.array([q.hz for q in rows if np.isfinite(q.hz)])
    fig, ax = plt.subplots(figsize=(5, 4))
    if rates.size:
        ax.hist(rates, bins=min(30, max(5, rates.size // 3)), color="tab:blue",
                alpha=0.85)
        ax.axvline(float(np.median(rates)), color="tab:red", linestyle="--",
                   label=f"median {np.median(rates):.1f} Hz")
        ax.legend()
    ax.set_xlabel("queries per second (Hz)")
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
