"""Matplotlib renderers for probe and report outputs.

Figures are written next to the delimited files they visualize; the CSV/JSON
stays the canonical record. Uses the Agg backend so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .landscape import ContourGrid

_ANCHOR_LABELS = ("w1", "w2", "w3")


def save_contour_figure(grid: ContourGrid, path, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    bb, aa = np.meshgrid(grid.b_values, grid.a_values)
    levels = 30
    cs = ax.contourf(aa, bb, grid.losses, levels=levels, cmap="viridis")
    ax.contour(aa, bb, grid.losses, levels=levels, colors="white", linewidths=0.3, alpha=0.5)
    fig.colorbar(cs, ax=ax, label="loss")
    for (a, b), name in zip(grid.anchor_coords, _ANCHOR_LABELS):
        ax.plot(a, b, marker="*", color="red", markersize=12)
        ax.annotate(name, (a, b), textcoords="offset points", xytext=(6, 6), color="red")
    ax.set_xlabel("plane coordinate a")
    ax.set_ylabel("plane coordinate b")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_interpolation_figure(curves: list[tuple[str, list[tuple[float, float]]]], path, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, points in curves:
        alphas = [a for a, _ in points]
        losses = [l for _, l in points]
        ax.plot(alphas, losses, marker="o", markersize=3, label=label)
    ax.set_xlabel("interpolation coefficient")
    ax.set_ylabel("loss")
    if len(curves) > 1:
        ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sharpness_figure(records: list[dict], path, title: str | None = None) -> None:
    """Grouped bars: one group per probed minimum, one bar per epsilon."""
    eps_values = sorted({r["epsilon"] for r in records})
    positions = sorted({r["task_position"] for r in records})
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    width = 0.8 / max(1, len(eps_values))
    for e_i, eps in enumerate(eps_values):
        xs, ys = [], []
        for p_i, pos in enumerate(positions):
            match = [r["phi"] for r in records if r["epsilon"] == eps and r["task_position"] == pos]
            if match:
                xs.append(p_i + e_i * width)
                ys.append(match[0])
        ax.bar(xs, ys, width=width, label=f"eps={eps:g}")
    ax.set_xticks([p + 0.4 - width / 2 for p in range(len(positions))])
    ax.set_xticklabels([f"task {p + 1}" for p in positions])
    ax.set_ylabel("sharpness (% rise)")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_summary_figure(rows: list[dict], path, title: str | None = None) -> None:
    """Accuracy and forgetting bars (with std whiskers) per method/init arm."""
    labels = [f"{r['method']}\n{r['init']}" for r in rows]
    x = np.arange(len(rows))
    fig, axes = plt.subplots(1, 2, figsize=(10.0, 4.0))
    for ax, key, name in (
        (axes[0], "accuracy", "average accuracy"),
        (axes[1], "forgetting", "forgetting"),
    ):
        means = [r[f"{key}_mean"] for r in rows]
        stds = [r[f"{key}_std"] for r in rows]
        ax.bar(x, means, yerr=stds, capsize=3, color="tab:blue" if key == "accuracy" else "tab:orange")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_title(name)
        ax.grid(axis="y", alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
