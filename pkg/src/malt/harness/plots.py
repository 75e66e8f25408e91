from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss(history: list[float], path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    h = np.asarray(history, dtype=np.float64)
    ax.plot(np.arange(1, len(h) + 1), h, lw=0.6, alpha=0.4, color="tab:blue")
    if len(h) >= 20:
        k = max(len(h) // 50, 5)
        smooth = np.convolve(h, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(k, len(h) + 1), smooth, lw=1.4, color="tab:blue")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_curves(curves: dict[str, list[dict]], path, key: str = "psnr",
                title: str = "per-segment error") -> Path:
    """One line per run: ``curves[name]`` holds rows with ``segment`` and ``key``."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, rows in sorted(curves.items()):
        ax.plot([r["segment"] for r in rows], [r[key] for r in rows], marker="o", ms=3, label=name)
    ax.set_xlabel("segment index")
    ax.set_ylabel(key.upper() if key == "psnr" else key)
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_bars(values: dict[str, float], path, ylabel: str, title: str = "",
              errors: dict[str, float] | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = list(values)
    err = [errors[n] for n in names] if errors else None
    ax.bar(names, [values[n] for n in names], yerr=err, color="tab:gray", capsize=3)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.tick_params(axis="x", labelsize=7)
    fig.tight_layout()
    return _save(fig, path)
