"""Report figures for the CLI (rendered off-screen with the Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no Software/date chunks, so reruns write identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def loss_curve(logs, path) -> None:
    """``logs``: sequence of EpochLog."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = [l.epoch for l in logs]
    ax.plot(epochs, [l.total for l in logs], label="total")
    ax.plot(epochs, [l.main for l in logs], label="final readout", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def steps_by_k(cells, path) -> None:
    """``cells``: {k: [(steps, rmse), ...]}."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for k, pts in sorted(cells.items()):
        xs, ys = zip(*sorted(pts))
        ax.plot(xs, ys, marker="o", label=f"k = {k}")
    ax.set_xlabel("propagation steps")
    ax.set_ylabel("test RMSE (m)")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def sparsity_curve(pts, path) -> None:
    """``pts``: [(sample count, rmse), ...]."""
    xs, ys = zip(*sorted(pts))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel("sparse samples per image")
    ax.set_ylabel("test RMSE (m)")
    ax.grid(alpha=0.3)
    _save(fig, path)


def toggle_bars(rows, path) -> None:
    """``rows``: [(label, rmse), ...]."""
    labels, vals = zip(*rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(range(len(vals)), vals)
    ax.set_xticks(range(len(vals)))
    ax.set_xticklabels(labels, rotation=20)
    ax.set_ylabel("test RMSE (m)")
    _save(fig, path)
