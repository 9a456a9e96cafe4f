"""Report figures rendered to files alongside the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_convergence(record, path):
    """Per-iteration energy terms from a reconstruction convergence record."""
    rows = np.asarray(record.rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(rows[:, 0], rows[:, 4], "k-", lw=2, label="total")
    ax.plot(rows[:, 0], rows[:, 1], "--", label="surface")
    ax.plot(rows[:, 0], rows[:, 2], "--", label="render")
    ax.plot(rows[:, 0], rows[:, 3], "--", label="regularizer")
    ax.set_xlabel("iteration")
    ax.set_ylabel("energy")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trajectory(graph, keyframe_truth, path, object_center=None):
    """Top-down view of estimated vs ground-truth keyframe positions."""
    from .geometry import camera_center

    ids = graph.keyframe_ids()
    est = np.array([camera_center(graph.keyframes[k].pose) for k in ids])
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(est[:, 0], est[:, 1], "o-", ms=2, lw=1, label="estimated")
    truth_ids = [k for k in ids if k in keyframe_truth]
    if truth_ids:
        gt = np.array([camera_center(keyframe_truth[k]) for k in truth_ids])
        ax.plot(gt[:, 0], gt[:, 1], "-", lw=1, alpha=0.7, label="ground truth")
    if object_center is not None:
        ax.plot([object_center[0]], [object_center[1]], "r*", ms=12, label="object")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_comparison(rows, path):
    """Bar chart of percentage changes between two runs."""
    labels = list(rows)
    pct = [rows[k]["percent_change"] for k in labels]
    colors = ["tab:green" if rows[k]["improved"] else "tab:red" for k in labels]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(labels, pct, color=colors)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_ylabel("change vs baseline [%]")
    for tick in ax.get_xticklabels():
        tick.set_rotation(20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
