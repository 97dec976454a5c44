"""Report figures written next to the machine-readable outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .depth_eval import METRICS  # noqa: E402


def _save(fig, path) -> None:
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_coverage(cmap, path, title: str = "coverage") -> None:
    fig, ax = plt.subplots(figsize=(8, 3))
    lo, hi = cmap.s_range
    ax.imshow(cmap.grid.T, origin="lower", aspect="auto", cmap="gray", vmin=0, vmax=1,
              extent=(lo, hi, 0, 360), interpolation="nearest")
    ratio = np.count_nonzero(cmap.grid) / cmap.grid.size
    ax.set_xlabel("arclength s (mm)")
    ax.set_ylabel("theta (deg)")
    ax.set_title(f"{title}: {100 * ratio:.1f}% seen")
    fig.tight_layout()
    _save(fig, path)


def plot_metrics(report, path) -> None:
    """Bar per metric with its bootstrap interval when one exists."""
    fig, axes = plt.subplots(1, len(METRICS), figsize=(10, 3))
    for ax, name in zip(axes, METRICS):
        val = report.value(name)
        ax.bar([0], [val], color="tab:blue")
        lo, hi = report.ci_low.get(name), report.ci_high.get(name)
        if lo is not None and hi is not None:
            ax.errorbar([0], [val], yerr=[[val - lo], [hi - val]], color="k", capsize=6)
        ax.set_xticks([])
        ax.set_title(f"{name}\n{val:.4g}")
    fig.tight_layout()
    _save(fig, path)


def plot_trajectory(poses, path, reference=None) -> None:
    """Top and side views of camera centres, optionally against a reference."""
    c = np.array([p.translation for p in poses])
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (i, j, lab) in zip(axes, ((0, 2, "x-z"), (1, 2, "y-z"))):
        if reference is not None:
            r = np.array([p.translation for p in reference])
            ax.plot(r[:, j], r[:, i], "k--", lw=1, label="reference")
        ax.plot(c[:, j], c[:, i], "o-", ms=3, label="estimate")
        ax.set_xlabel("z (mm)")
        ax.set_ylabel(lab[0] + " (mm)")
        ax.set_title(lab)
        ax.axis("equal")
    axes[0].legend(loc="best")
    fig.tight_layout()
    _save(fig, path)
