"""Figures for sweep results, rendered off-screen to image files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .simharness import METHODS  # noqa: E402

LABELS = {"delta": "DELTA-MRI", "tcs": "TCS-MRI", "zidft": "Z-IDFT"}
FIGSIZE = (8.0, 6.0)
DPI = 100


def plot_sweep(result, path, title: str | None = None):
    """Median normalized error versus sampling percentage, one line per method.

    Writes an 800x600 image; the format follows the file suffix.
    """
    med = result.medians()
    fig, ax = plt.subplots(figsize=FIGSIZE, dpi=DPI)
    try:
        order = [m for m in METHODS if m in med] + sorted(set(med) - set(METHODS))
        for method in order:
            pcts = sorted(med[method])
            ax.plot(pcts, [med[method][p] for p in pcts], marker="o",
                    label=LABELS.get(method, method))
        ax.axhline(1.0, color="0.6", lw=0.8, ls="--")
        ax.set_xscale("log")
        ax.set_xlabel("sampled k-space (%)")
        ax.set_ylabel("median normalized error")
        if title:
            ax.set_title(title)
        if order:
            ax.legend()
        ax.grid(True, which="both", alpha=0.3)
        fig.savefig(path, dpi=DPI)
    finally:
        plt.close(fig)
    return path
