"""Static figures written next to the CSV tables (Agg backend, PNG)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no software/version stamp, so reruns produce identical bytes
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_curves(rows, path):
    """rows: dicts with run, fold, epoch, train_loss, val_loss, val_acc (optional source)."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    groups = {}
    for r in rows:
        groups.setdefault((r.get("source", ""), r["run"], r["fold"]), []).append(r)
    for (source, run, fold), rs in sorted(groups.items()):
        ep = [r["epoch"] for r in rs]
        label = f"{source} run {run} fold {fold}".strip() if len(groups) > 1 else None
        axes[0].plot(ep, [r["train_loss"] for r in rs], lw=1, label=label)
        axes[1].plot(ep, [r["val_loss"] for r in rs], lw=1)
        axes[2].plot(ep, [r["val_acc"] for r in rs], lw=1)
    for ax, title in zip(axes, ("training loss", "validation loss", "validation accuracy")):
        ax.set_title(title)
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    axes[2].set_ylim(0, 1.02)
    if 1 < len(groups) <= 10:
        axes[0].legend(fontsize=7)
    _save(fig, path)


def plot_sweep(rows, path):
    """One heatmap of validation accuracy per TL value; failed cells hatched."""
    tls = sorted({r["tl"] for r in rows}, key=lambda v: (v == "all", str(v).zfill(6)))
    lrs = sorted({r["lr"] for r in rows}, reverse=True)
    bss = sorted({r["bs"] for r in rows})
    fig, axes = plt.subplots(1, len(tls), figsize=(1.6 + 1.3 * len(bss) * len(tls), 1.2 + 0.8 * len(lrs)),
                             squeeze=False)
    for ax, tl in zip(axes[0], tls):
        grid = np.full((len(lrs), len(bss)), np.nan)
        for r in rows:
            if r["tl"] == tl and r["status"] == "ok":
                grid[lrs.index(r["lr"]), bss.index(r["bs"])] = r["val_acc"]
        im = ax.imshow(np.ma.masked_invalid(grid), vmin=0, vmax=1, cmap="viridis", aspect="auto")
        for i in range(len(lrs)):
            for j in range(len(bss)):
                text = "fail" if np.isnan(grid[i, j]) else f"{grid[i, j]:.3f}"
                ax.text(j, i, text, ha="center", va="center", fontsize=8,
                        color="white" if np.isnan(grid[i, j]) or grid[i, j] < 0.6 else "black")
        ax.set_xticks(range(len(bss)), [str(b) for b in bss])
        ax.set_yticks(range(len(lrs)), [f"{lr:g}" for lr in lrs])
        ax.set_xlabel("batch size")
        ax.set_ylabel("learning rate")
        ax.set_title(f"TL = {tl}")
        ax.set_facecolor("0.6")
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="validation accuracy")
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_confusion(cm, path):
    grid = np.array(cm.grid())
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    ax.imshow(grid, cmap="Blues")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, str(grid[i, j]), ha="center", va="center",
                    color="white" if grid[i, j] > grid.max() / 2 else "black")
    names = ["NORMAL", "PNEUMONIA"]
    ax.set_xticks([0, 1], names)
    ax.set_yticks([0, 1], names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    _save(fig, path)
