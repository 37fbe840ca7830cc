"""Report figures rendered to PNG with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .features import SPS_OFFSET, encode_sps  # noqa: E402

METRICS = ("recall", "precision", "f1")
COLORS = {"miso": "tab:orange", "mimo": "tab:blue"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep_box(sweeps: dict, path) -> Path:
    """Box per (metric, model) over the threshold sweep."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    kinds = list(sweeps)
    data, pos, cols = [], [], []
    for i, m in enumerate(METRICS):
        for j, k in enumerate(kinds):
            data.append([getattr(r, m) for r in sweeps[k]])
            pos.append(i * (len(kinds) + 1) + j)
            cols.append(COLORS.get(k, "gray"))
    bp = ax.boxplot(data, positions=pos, widths=0.7, patch_artist=True)
    for patch, c in zip(bp["boxes"], cols):
        patch.set_facecolor(c)
        patch.set_alpha(0.6)
    centers = [i * (len(kinds) + 1) + (len(kinds) - 1) / 2 for i in range(len(METRICS))]
    ax.set_xticks(centers)
    ax.set_xticklabels(["Recall", "Precision", "F1"])
    ax.set_ylabel("score across thresholds")
    ax.legend([plt.Rectangle((0, 0), 1, 1, fc=COLORS.get(k, "gray"), alpha=0.6) for k in kinds],
              [k.upper() for k in kinds], loc="lower left")
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_sweep_curves(sweeps: dict, path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(10, 3), sharey=True)
    for ax, m in zip(axes, METRICS):
        for k, rows in sweeps.items():
            xs = [r.keys["threshold"] for r in rows]
            ax.plot(xs, [getattr(r, m) for r in rows], "o-", color=COLORS.get(k), label=k.upper())
        ax.set_title(m)
        ax.set_xlabel("threshold")
        ax.grid(alpha=0.3)
    axes[0].legend()
    return _save(fig, path)


def plot_loss_curves(logs: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for k, hist in logs.items():
        ep = [h["epoch"] for h in hist]
        ax.plot(ep, [h["train_loss"] for h in hist], "-", color=COLORS.get(k), label=f"{k} train")
        ax.plot(ep, [h["val_loss"] for h in hist], "--", color=COLORS.get(k), label=f"{k} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss per utterance")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_sps_example(entry: dict, outputs: dict, path, frame: int | None = None) -> Path:
    """Ground-truth vs estimated SPS for one frame where every source is active."""
    from .dataset import entry_angles, entry_vad
    flags = entry_vad(entry)
    if frame is None:
        both = np.nonzero(flags.all(axis=0))[0]
        frame = int(both[len(both) // 2]) if len(both) else flags.shape[1] // 2
    angles = [a for a, on in zip(entry_angles(entry), flags[:, frame]) if on]
    x = np.arange(210) - SPS_OFFSET
    fig, axes = plt.subplots(1, len(outputs), figsize=(5 * len(outputs), 3), squeeze=False)
    for ax, (k, out) in zip(axes[0], outputs.items()):
        ax.plot(x, encode_sps(angles), color="tab:blue", lw=2, label="truth (pooled)")
        for b in range(out.shape[1]):
            ax.plot(x, out[frame, b], color="tab:red", alpha=0.5 + 0.5 * (b == out.shape[1] - 1),
                    label="estimate" if b == 0 else None)
        ax.set_title(f"{k.upper()} {entry['id']} frame {frame}")
        ax.set_xlabel("angle (deg)")
        ax.set_ylim(-0.05, 1.05)
        ax.legend(loc="upper right", fontsize=7)
    return _save(fig, path)
