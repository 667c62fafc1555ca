"""Raster curves for evaluation reports (drop vs threshold, IoU vs intensity)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_faithfulness(report, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    summary = report.summary()
    thresholds = [row["threshold"] for row in summary]
    for method in sorted(k for k in summary[0] if k != "threshold"):
        ax.plot(thresholds, [row[method] for row in summary], marker="o", label=method)
    ax.set_xlabel("mask threshold")
    ax.set_ylabel("mean probability drop")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_robustness(report, path, threshold=0.5):
    """One curve per perturbation kind at the given mask threshold."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    rows = [r for r in report.rows if r["threshold"] == threshold]
    for kind in sorted({r["perturbation"] for r in rows}):
        pts = sorted((r["intensity"], r["mean_iou"]) for r in rows if r["perturbation"] == kind)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=kind)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("intensity")
    ax.set_ylabel(f"mean IoU (t={threshold})")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
