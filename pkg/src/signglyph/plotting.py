"""Static figures for the ``report`` command.

Only the Agg backend is used so reports render headless and the PNG bytes
do not depend on a display.
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_METADATA = {
    "png": {"Software": None},
    "svg": {"Date": None, "Creator": None},
    "pdf": {"CreationDate": None, "Producer": None, "Creator": None},
}

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "legend.frameon": False,
    "svg.hashsalt": "signglyph",
}


def _save(fig, path, fmt):
    fig.savefig(path, format=fmt, dpi=120, bbox_inches="tight", metadata=_METADATA.get(fmt))
    plt.close(fig)


def plot_curves(history, title, path, fmt="png"):
    """Two-panel loss/accuracy-vs-epoch figure for one training run."""
    epochs = [m.epoch for m in history]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 3.8))
        ax_loss.plot(epochs, [m.train_loss for m in history], "o-", ms=3, label="train")
        ax_loss.plot(epochs, [m.val_loss for m in history], "s-", ms=3, label="validation")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("cross-entropy loss")
        ax_loss.legend()
        ax_acc.plot(epochs, [m.train_acc for m in history], "o-", ms=3, label="train")
        ax_acc.plot(epochs, [m.val_acc for m in history], "s-", ms=3, label="validation")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("accuracy")
        ax_acc.set_ylim(0, 1.02)
        ax_acc.legend()
        fig.suptitle(title)
        _save(fig, path, fmt)


def plot_comparison(rows, path, fmt="png"):
    """Horizontal bar chart of (method, accuracy %) rows; own runs highlighted."""
    names = [r.method for r in rows]
    values = [r.accuracy for r in rows]
    colours = ["tab:orange" if r.ours else "tab:gray" for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 0.5 * len(rows) + 1.2))
        y = range(len(rows))
        ax.barh(y, values, color=colours)
        ax.set_yticks(list(y), names)
        ax.invert_yaxis()
        ax.set_xlim(0, 100)
        ax.set_xlabel("accuracy (%)")
        for yi, v in zip(y, values):
            ax.text(v + 1, yi, f"{v:.1f}", va="center", fontsize=8)
        _save(fig, path, fmt)
