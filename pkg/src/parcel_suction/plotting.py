"""Figures written next to the CSV/JSON outputs of the command-line tools."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "legend.frameon": False,
    "svg.hashsalt": "parcel-suction",
}

# PNG metadata carries the matplotlib version by default; drop it for stable bytes
_METADATA = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)


def plot_loss(train_loss, eval_loss, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(np.arange(1, len(train_loss) + 1), train_loss, label="train (batch mean)")
        ax.semilogy(np.arange(len(eval_loss)), eval_loss, label="fixed draws", color="k", ls="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def plot_ap_bars(aggregate: dict, path) -> None:
    """Grouped bars: one group per (top-k, metric), one bar per method."""
    methods = list(aggregate)
    keys = [(k, m) for k in sorted({int(k) for rows in aggregate.values() for k in rows})
            for m in ("AP", "AP08", "AP04")]
    width = 0.8 / max(1, len(methods))
    x = np.arange(len(keys))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        for j, method in enumerate(methods):
            vals = [aggregate[method].get(str(k), {}).get(m, np.nan) for k, m in keys]
            ax.bar(x + (j - (len(methods) - 1) / 2) * width, vals, width, label=method)
        ax.set_xticks(x, [f"Top-{k}\n{m.replace('AP0', 'AP0.')}" for k, m in keys])
        ax.set_ylim(0, 100)
        ax.set_ylabel("percent")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
