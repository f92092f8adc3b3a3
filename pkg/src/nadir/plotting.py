"""Report figures (PNG) written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def new_figure(width: float = 5.0, ratio: float = 0.62, **kw):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, width * ratio), **kw)
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_batch_sweep(rows: Dict[str, Sequence[dict]], path, metric: str = "total_sec"):
    """Inference time (or throughput) against batch size, log-log, one line per decoder."""
    fig, ax = new_figure()
    for label, rs in rows.items():
        xs = [r["batch_size"] for r in rs]
        ys = [r[metric] for r in rs]
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("batch size")
    ax.set_ylabel("inference time (s)" if metric == "total_sec" else "words / second")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(frameon=False)
    return save(fig, path)


def plot_breakdown(reports: Dict[str, dict], path):
    """Grouped bars of insertion/substitution/omission/repetition counts."""
    cols = ("insertions", "substitutions", "omissions", "repetitions")
    fig, ax = new_figure(width=5.5)
    n = max(1, len(reports))
    w = 0.8 / n
    for i, (label, counts) in enumerate(reports.items()):
        xs = [j + (i - (n - 1) / 2) * w for j in range(len(cols))]
        ax.bar(xs, [counts[c] for c in cols], width=w, label=label)
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels([c.capitalize() for c in cols])
    ax.set_ylabel("count")
    ax.legend(frameon=False)
    return save(fig, path)


def plot_ablation(summary: dict, path, title: Optional[str] = None):
    variants = summary["variants"]
    fig, (ax1, ax2) = new_figure(width=7.0, ratio=0.4, ncols=2)
    names = list(variants)
    for i, name in enumerate(names):
        cers = [r["cer"] for r in variants[name]["runs"]]
        ax1.scatter([i] * len(cers), cers, color="0.6", s=12, zorder=2)
        ax1.bar(i, variants[name]["median_cer"], color=f"C{i}", alpha=0.7)
    ax1.set_xticks(range(len(names)))
    ax1.set_xticklabels(names)
    ax1.set_ylabel("test CER (%)")
    cols = ("insertions", "substitutions", "omissions", "repetitions")
    w = 0.8 / max(1, len(names))
    for i, name in enumerate(names):
        counts = variants[name]["median_counts"]
        ax2.bar([j + (i - (len(names) - 1) / 2) * w for j in range(len(cols))], [counts[c] for c in cols],
                width=w, color=f"C{i}", label=name)
    ax2.set_xticks(range(len(cols)))
    ax2.set_xticklabels([c[:4] for c in cols])
    ax2.set_yscale("symlog")
    ax2.legend(frameon=False)
    if title:
        fig.suptitle(title)
    return save(fig, path)
