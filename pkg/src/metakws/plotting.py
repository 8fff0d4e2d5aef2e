"""Figures written next to the CSV/JSON reports."""

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}
COLORS = {"extended": "#c0392b", "original": "#2471a3", "supervised": "#7f8c8d"}
LABELS = {"extended": "MAML-ext", "original": "MAML-ori", "supervised": "Superv. L."}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_shot_sweep(reports: Sequence, path, title: str = "Accuracy with changing shot") -> Path:
    """Accuracy (%) vs K per variant, error bars are the 95% CI half-widths."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for variant in sorted({r.variant for r in reports}):
            rows = sorted((r for r in reports if r.variant == variant), key=lambda r: r.k_shot)
            ks = [r.k_shot for r in rows]
            ax.errorbar(ks, [100 * r.mean for r in rows], yerr=[100 * r.ci95 for r in rows],
                        marker="o", ms=3.5, capsize=2, lw=1.2,
                        color=COLORS.get(variant), label=LABELS.get(variant, variant))
        ax.set_xscale("log")
        ks = sorted({r.k_shot for r in reports})
        ax.set_xticks(ks)
        ax.set_xticklabels([str(k) for k in ks])
        ax.set_xlabel("shots per keyword (K)")
        ax.set_ylabel("accuracy (%)")
        ax.set_title(title)
        ax.legend(frameon=False)
        ax.grid(alpha=0.3, lw=0.5)
        return _save(fig, path)


def plot_confusion(report, path) -> Path:
    conf = np.asarray(report.confusion, dtype=float)
    rows = conf.sum(axis=1, keepdims=True)
    frac = np.divide(conf, rows, out=np.zeros_like(conf), where=rows > 0)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 4.0))
        im = ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
        ax.set_xticks(range(len(report.class_names)))
        ax.set_yticks(range(len(report.class_names)))
        ax.set_xticklabels(report.class_names, rotation=60, ha="right")
        ax.set_yticklabels(report.class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(f"{LABELS.get(report.variant, report.variant)}, K={report.k_shot}: "
                     f"{100 * report.mean:.2f} ± {100 * report.ci95:.2f}%")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        return _save(fig, path)


def plot_training_log(rows: Sequence[dict], path, title: str = "meta-training") -> Path:
    it = np.array([r["iteration"] for r in rows])
    loss = np.array([r["meta_loss"] for r in rows], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        ax.plot(it, loss, lw=0.6, color="#aab7b8", label="per iteration")
        if len(loss) >= 10:
            w = max(len(loss) // 20, 5)
            smooth = np.convolve(loss, np.ones(w) / w, mode="valid")
            ax.plot(it[w - 1:], smooth, lw=1.4, color="#c0392b", label=f"moving mean ({w})")
        ax.set_xlabel("meta-iteration")
        ax.set_ylabel("meta-loss")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)
