"""Report figures: training curves and error breakdowns (rendered off-screen)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def plot_loss_curve(history, path, per_head=None, title="training loss"):
    """Combined loss per epoch, plus optional per-head curves (head -> list)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = range(1, len(history) + 1)
        ax.plot(epochs, history, marker="o", lw=1.5, label="combined")
        for head, values in (per_head or {}).items():
            ax.plot(range(1, len(values) + 1), values, lw=1, ls="--", label=head)
        ax.set_xlabel("epoch")
        ax.set_ylabel("CTC loss per utterance")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_error_breakdown(breakdowns, path, title="errors"):
    """Stacked substitution/insertion/deletion bars, one per system.

    ``breakdowns`` maps a system label to an :class:`ErrorBreakdown`; the bar
    height is the error rate in percent.
    """
    labels = list(breakdowns)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bottom = [0.0] * len(labels)
        for field, name in (("sub", "substitutions"), ("ins", "insertions"), ("dele", "deletions")):
            vals = [
                100.0 * getattr(eb, field) / eb.ref_len if eb.ref_len else 0.0
                for eb in breakdowns.values()
            ]
            ax.bar(labels, vals, bottom=bottom, label=name, width=0.6)
            bottom = [b + v for b, v in zip(bottom, vals)]
        for x, total in enumerate(bottom):
            ax.text(x, total, f"{total:.1f}", ha="center", va="bottom")
        ax.set_ylabel("% of reference tokens")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path
