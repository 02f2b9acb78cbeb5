"""Training-history figures, rendered to files with the Agg backend."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_history(history, path, title=None):
    """Loss, loss weights and per-level accuracy against epoch.

    ``history`` is a list of MetricsRecord.  Returns the written path.
    """
    if not history:
        raise ValueError("nothing to plot: empty history")
    path = Path(path)
    K = len(history[0].weights)
    epochs = [r.epoch for r in history]
    fig, (ax_loss, ax_w, ax_acc) = plt.subplots(3, 1, figsize=(6.4, 8.0), sharex=True)

    ax_loss.plot(epochs, [r.train_loss for r in history], color="black")
    ax_loss.set_ylabel("train loss")
    ax_lr = ax_loss.twinx()
    ax_lr.step(epochs, [r.lr for r in history], where="post", color="grey", linestyle=":")
    ax_lr.set_yscale("log")
    ax_lr.set_ylabel("learning rate")

    colors = plt.get_cmap("viridis")([k / max(K - 1, 1) for k in range(K)])
    for k in range(K):
        ax_w.step(epochs, [r.weights[k] for r in history], where="post", color=colors[k], label=f"level {k + 1}")
        ax_acc.plot(epochs, [r.train_acc[k] for r in history], color=colors[k], linestyle="--")
        if history[0].test_acc:
            ax_acc.plot(epochs, [r.test_acc[k] for r in history], color=colors[k], label=f"level {k + 1} test")
    ax_w.set_ylabel("loss weight")
    ax_w.set_ylim(-0.05, 1.05)
    ax_w.legend(loc="best", fontsize="small")
    ax_acc.set_ylabel("accuracy (dashed: train)")
    ax_acc.set_xlabel("epoch")
    ax_acc.legend(loc="lower right", fontsize="small")
    for ax in (ax_loss, ax_w, ax_acc):
        ax.grid(True, alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_comparison(histories, path, level=None, title=None):
    """Test accuracy curves of several runs on one axis.

    ``histories`` maps a label to a history; ``level`` defaults to each
    run's finest level.
    """
    if not histories:
        raise ValueError("nothing to plot")
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, history in histories.items():
        k = (len(history[0].weights) if level is None else level) - 1
        ax.plot([r.epoch for r in history], [r.test_acc[k] for r in history], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize="small")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
