"""Figures for grid results: accuracy from clean inputs, through the attack, to recovery."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STAGES = ("Clean", "FGSM on A", "After defense")


def _evolution_axes(ax, results, column: str, title: str) -> None:
    cmap = plt.get_cmap("viridis")
    attack_levels = sorted({r.attack_eps for r in results})
    markers = "osD^v"
    for r in results:
        values = [r.clean_A, r.fgsm_on_A, getattr(r, column)]
        if any(math.isnan(v) for v in values):
            continue
        shade = attack_levels.index(r.attack_eps) / max(len(attack_levels) - 1, 1)
        ax.plot(range(3), [100.0 * v for v in values], color=cmap(0.85 * shade),
                marker=markers[attack_levels.index(r.attack_eps) % len(markers)],
                lw=1.4, label=f"attack {r.attack_eps:.2f} / budget {r.defense_eps:.2f}")
    ax.set_xticks(range(3))
    ax.set_xticklabels(STAGES)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, loc="lower left", ncol=1 if len(results) < 5 else 2)


def plot_accuracy_evolution(results, out_dir, dpi: int = 150) -> dict[str, Path]:
    """Write ``transfer.png`` and ``whitebox.png`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for column, name, title in (
            ("transfer", "transfer", "Transfer: FGSM from A evaluated on A'"),
            ("whitebox", "whitebox", "White-box: FGSM from A' evaluated on A'")):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        _evolution_axes(ax, results, column, title)
        fig.tight_layout()
        paths[name] = out / f"{name}.png"
        fig.savefig(paths[name], dpi=dpi)
        plt.close(fig)
    return paths


def plot_grid_heatmap(results, path, dpi: int = 150) -> Path:
    """White-box accuracy of A' per (attack eps, defense budget) cell."""
    attacks = sorted({r.attack_eps for r in results})
    budgets = sorted({r.defense_eps for r in results})
    grid = [[math.nan] * len(budgets) for _ in attacks]
    for r in results:
        grid[attacks.index(r.attack_eps)][budgets.index(r.defense_eps)] = 100.0 * r.whitebox
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    im = ax.imshow(grid, cmap="magma", vmin=0, vmax=100, aspect="auto")
    for i, row in enumerate(grid):
        for j, v in enumerate(row):
            if not math.isnan(v):
                ax.text(j, i, f"{v:.1f}", ha="center", va="center",
                        color="white" if v < 60 else "black", fontsize=8)
    ax.set_xticks(range(len(budgets)))
    ax.set_xticklabels([f"{b:.2f}" for b in budgets])
    ax.set_yticks(range(len(attacks)))
    ax.set_yticklabels([f"{a:.2f}" for a in attacks])
    ax.set_xlabel("defense budget")
    ax.set_ylabel("attack epsilon")
    fig.colorbar(im, ax=ax, label="white-box accuracy (%)")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path
