"""Figure rendering for the report commands (files only, no GUI)."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.figsize": (6.0, 3.7),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def write_series(path: str | Path, columns: dict[str, Sequence]) -> None:
    """x/y series CSV for external plotting."""
    names = list(columns)
    n = max(len(v) for v in columns.values())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(n):
            w.writerow([repr(float(columns[k][i])) if i < len(columns[k]) else "" for k in names])


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_trace(epochs, loss, mse, semantic, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.plot(epochs, loss, label="total")
        ax.plot(epochs, mse, label="noise MSE", ls="--")
        if np.any(np.asarray(semantic) > 0):
            ax.plot(epochs, semantic, label="semantic", ls=":")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        return _save(fig, path)


def score_histogram(scores, threshold: float, path, truth=None) -> Path:
    scores = np.asarray(scores)
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        bins = np.linspace(scores.min(), scores.max(), 60)
        if truth is None:
            ax.hist(scores, bins=bins, color="0.4")
        else:
            truth = np.asarray(truth).astype(bool)
            ax.hist(scores[~truth], bins=bins, alpha=0.7, label="nominal")
            ax.hist(scores[truth], bins=bins, alpha=0.7, label="injected anomaly")
            ax.legend()
        ax.axvline(threshold, color="k", lw=1)
        ax.set_xlabel("OOD score")
        ax.set_ylabel("windows")
        ax.set_yscale("log")
        return _save(fig, path)


def roc(curves: dict[str, tuple[np.ndarray, np.ndarray]], path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        for name, (fpr, tpr) in curves.items():
            ax.plot(fpr, tpr, label=name)
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(loc="lower right")
        return _save(fig, path)


def latency(rff_ns, ddpm_ns, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        lo = max(min(np.min(rff_ns), np.min(ddpm_ns)), 1)
        hi = max(np.max(rff_ns), np.max(ddpm_ns))
        bins = np.logspace(np.log10(lo), np.log10(hi), 80)
        ax.hist(rff_ns, bins=bins, alpha=0.7, label="RFF detector")
        ax.hist(ddpm_ns, bins=bins, alpha=0.7, label="DDPM profile")
        ax.set_xscale("log")
        ax.set_xlabel("latency per window [ns]")
        ax.set_ylabel("iterations")
        ax.legend()
        return _save(fig, path)
