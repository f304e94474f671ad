"""Accuracy-vs-epoch charts: one panel per attack, solid single, dashed ensemble."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

from .harness import read_csv


def plot_csv(csv_path: str | Path, out: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_csv(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: no records to plot")
    series = defaultdict(list)
    for r in rows:
        series[r["attack"], float(r["epsilon"]), r["predictor"]].append((int(r["epoch"]), float(r["accuracy"])))
    attacks = sorted({k[0] for k in series})
    epsilons = sorted({k[1] for k in series})
    colors = plt.get_cmap("viridis")
    fig, axes = plt.subplots(1, len(attacks), figsize=(5 * len(attacks), 4), squeeze=False)
    for ax, attack in zip(axes[0], attacks):
        for i, eps in enumerate(epsilons):
            color = colors(i / max(len(epsilons) - 1, 1))
            for predictor, style in (("SINGLE", "-"), ("ENSEMBLE", "--")):
                points = sorted(series.get((attack, eps, predictor), []))
                if points:
                    ax.plot(*zip(*points), style, color=color, label=f"eps={eps:g} {predictor.lower()}")
        ax.set_title(attack)
        ax.set_xlabel("epoch")
        ax.set_ylabel("adversarial accuracy")
        ax.legend(fontsize="x-small")
    fig.tight_layout()
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
