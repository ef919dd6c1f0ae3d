"""SVG figures. Fixed hash salt and no date metadata keep re-runs byte-identical."""
import pathlib
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "tnn-approx"
_SVG_METADATA = {"Date": None, "Creator": None}


def _save(fig, path: str | pathlib.Path) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_METADATA, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_fronts(fronts: Mapping[int, Sequence], combined: Sequence, path, title: str = "") -> pathlib.Path:
    """Accuracy over total system area per input precision, combined front highlighted."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in sorted(fronts):
        points = fronts[k]
        ax.scatter([p.total_area for p in points], [100 * p.accuracy for p in points], s=14, alpha=0.6,
                   label=f"k={k} ({points[0].interface if points else '-'})")
    if combined:
        ordered = sorted(combined, key=lambda p: p.total_area)
        ax.step([p.total_area for p in ordered], [100 * p.accuracy for p in ordered], where="post",
                color="black", linewidth=1, label="system front")
    ax.set_xlabel("total area [mm$^2$]")
    ax.set_ylabel("test accuracy [%]")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_variation(reports: Mapping[str, object], path, title: str = "") -> pathlib.Path:
    """One box per model over its Monte-Carlo trial accuracies."""
    labels = list(reports)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    ax.boxplot([100 * reports[label].trials for label in labels])
    ax.set_xticks(range(1, len(labels) + 1), labels, rotation=30, ha="right")
    ax.scatter(range(1, len(labels) + 1), [100 * reports[label].nominal for label in labels],
               marker="x", color="red", zorder=3, label="nominal")
    ax.set_ylabel("test accuracy [%]")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_error_sweep(rows: Sequence[dict], path, metric: str = "mde") -> pathlib.Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["level"] for r in rows], [100 * r["accuracy"] for r in rows], marker="o", markersize=3)
    ax.set_xscale("symlog", linthresh=1e-3)
    ax.set_xlabel(f"per-neuron {metric} level")
    ax.set_ylabel("accuracy [%]")
    ax.grid(alpha=0.3)
    return _save(fig, path)
