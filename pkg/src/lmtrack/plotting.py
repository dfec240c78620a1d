"""PNG figures for run artifacts (loss curves, recall sweeps, ablation tables)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def smooth(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if window <= 1 or len(values) < window:
        return values
    return np.convolve(values, np.ones(window) / window, mode="valid")


def plot_loss(losses: list, path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if len(losses):
        ax.plot(np.arange(len(losses)), losses, color="0.75", lw=0.6, label="per step")
        window = max(1, len(losses) // 50)
        sm = smooth(losses, window)
        ax.plot(np.arange(len(sm)) + window - 1, sm, color="C0", lw=1.5, label=f"mean of {window}")
        ax.legend(loc="upper right")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    return _save(fig, path)


def plot_recall_sweep(thresholds: list, path, title: str = "recall sweep") -> Path:
    """MOTAR and MOTP against the recall target, one point per threshold."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if thresholds:
        r = [t["target_recall"] for t in thresholds]
        ax.plot(r, [t["motar"] for t in thresholds], marker=".", label="MOTAR")
        ax2 = ax.twinx()
        ax2.plot(r, [t["motp"] for t in thresholds], marker=".", color="C1", label="MOTP")
        ax2.set_ylabel("MOTP [m]")
        ax.legend(loc="lower left")
        ax2.legend(loc="lower right")
    ax.set_xlabel("recall target")
    ax.set_ylabel("MOTAR")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    return _save(fig, path)


def plot_ablation(rows: list, path, title: str = "ablation") -> Path:
    """Side-by-side AMOTA and IDS bars, one group per table row."""
    labels = [str(r["label"]) for r in rows]
    x = np.arange(len(rows))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(max(6, 1.2 * len(rows) + 3), 3.8))
    a1.bar(x, [r["amota"] for r in rows], color="C0")
    a1.set_ylabel("AMOTA")
    a2.bar(x, [r["ids"] for r in rows], color="C3")
    a2.set_ylabel("IDS")
    for ax in (a1, a2):
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    fig.suptitle(title)
    return _save(fig, path)
