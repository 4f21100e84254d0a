"""Report figures, rendered off-screen to image files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .store import atomic_open  # noqa: E402


def _save(fig, path) -> None:
    with atomic_open(path, "wb") as fh:
        fig.savefig(fh, format="png", dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def bar_chart(values: dict[str, float], title: str, ylabel: str, path, lower_is_better=False) -> None:
    names = list(values)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names)), 3.2))
    bars = ax.bar(names, [values[n] for n in names], color="#4c72b0")
    for b, n in zip(bars, names):
        ax.annotate(f"{values[n]:.4f}", (b.get_x() + b.get_width() / 2, b.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_title(title + (" (lower is better)" if lower_is_better else ""))
    ax.set_ylabel(ylabel)
    ax.tick_params(axis="x", labelrotation=20)
    _save(fig, path)


def loss_curve(series: dict[str, list[float]], title: str, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for name, ys in series.items():
        if ys:
            ax.plot(range(1, len(ys) + 1), ys, marker="o", markersize=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)
