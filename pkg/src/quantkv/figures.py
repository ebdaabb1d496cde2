"""Matplotlib renderers for CLI report outputs.

Every report path writes a figure next to its delimited data file.  The Agg
backend keeps this headless-safe.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .quantize import AXES, ROTATIONS

_SAVE = {"dpi": 150, "bbox_inches": "tight"}


def sweep_heatmap(cells, path):
    labels = [f"{a}/{r}" for a in AXES for r in ROTATIONS]
    index = {lab: i for i, lab in enumerate(labels)}
    grid = np.full((len(labels), len(labels)), np.nan)
    for c in cells:
        grid[index[c.key_label], index[c.value_label]] = c.mse_output
    fig, ax = plt.subplots(figsize=(7, 6))
    with np.errstate(divide="ignore"):
        im = ax.imshow(np.log10(grid), cmap="viridis")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("value config (axis/rotation)")
    ax.set_ylabel("key config (axis/rotation)")
    ax.set_title("attention output MSE (log10)")
    bi, bj = np.unravel_index(np.nanargmin(grid), grid.shape)
    ax.scatter([bj], [bi], marker="*", s=200, c="red", label="minimum")
    ax.legend(loc="upper right")
    fig.colorbar(im, ax=ax)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def error_report_figure(report, path):
    idx = np.arange(len(report.rows))
    weights = [r.mse_weights for r in report.rows]
    outputs = [r.mse_outputs for r in report.rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, vals, name in zip(axes, (weights, outputs), ("weight MSE", "output MSE")):
        ax.bar(idx, vals)
        ax.set_yscale("log")
        ax.set_xlabel("(layer, head) index")
        ax.set_title(name)
    fig.suptitle(f"K {report.config_k.label()}  V {report.config_v.label()}  "
                 f"adapter={'on' if report.adapter_enabled else 'off'}")
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def scale_stats_figure(stats, path):
    labels = [f"{s.axis}/{s.rotation}" for s in stats]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(stats)), [s.mean_scale for s in stats])
    ax.set_xticks(range(len(stats)), labels, rotation=30, ha="right")
    ax.set_ylabel("mean group scale")
    ax.set_title("key quantization scales by grouping variant")
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def rank_curve_figure(points, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ranks = [p.rank for p in points]
    ax.plot(ranks, [p.mse_weights for p in points], marker="o", label="weight MSE")
    ax.plot(ranks, [p.mse_outputs for p in points], marker="s", label="output MSE")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("adapter feature rank D")
    ax.set_ylabel("MSE after training")
    ax.legend()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def loss_curve_figure(losses_by_head, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for (li, hi), losses in sorted(losses_by_head.items()):
        ax.plot(losses, label=f"layer {li} head {hi}")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    if len(losses_by_head) <= 8:
        ax.legend()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
