"""Deterministic SVG figures: per-kind feature scatters and AP bar charts."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import FEATURE_KINDS, pca_2d

log = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "icod"
_SAVE_KWARGS = {"format": "svg", "metadata": {"Date": None}}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
    return path


def feature_scatter_plots(table, out_dir, kinds=FEATURE_KINDS):
    """One 2D PCA scatter per feature kind, colored by class."""
    out = []
    for kind in kinds:
        vectors, labels = table.vectors(kind)
        if len(labels) < 2:
            log.warning("feature kind %s has < 2 rows; skipping scatter", kind)
            continue
        points = pca_2d(vectors, labels)
        fig, ax = plt.subplots(figsize=(4.5, 4))
        classes = sorted({c for c, _, _ in points})
        cmap = plt.get_cmap("tab10")
        for i, c in enumerate(classes):
            xs = [x for cc, x, _ in points if cc == c]
            ys = [y for cc, _, y in points if cc == c]
            ax.scatter(xs, ys, s=10, color=cmap(i % 10), label=str(c))
        ax.set_title(f"{kind} instance features (PCA)")
        ax.legend(fontsize=6, title="class")
        out.append(_save(fig, Path(out_dir) / f"features_{kind}.svg"))
    return out


def ap_bar_chart(report_before, report_after, out_path, labels=("before", "after")):
    """Grouped per-class AP bars for two eval reports."""
    classes = sorted(set(report_before.per_class_ap) | set(report_after.per_class_ap))
    before = [report_before.per_class_ap.get(c, 0.0) for c in classes]
    after = [report_after.per_class_ap.get(c, 0.0) for c in classes]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(classes) + 2), 3.2))
    xs = range(len(classes))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], before, width, label=labels[0])
    ax.bar([x + width / 2 for x in xs], after, width, label=labels[1])
    ax.set_xticks(list(xs))
    ax.set_xticklabels([str(c) for c in classes])
    ax.set_xlabel("class")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.05)
    ax.legend()
    return _save(fig, out_path)
