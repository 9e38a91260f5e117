"""Matplotlib figure rendering for the report paths.

Figures are written as SVG next to the delimited output. The SVG backend is
pinned to a fixed hash salt and stripped of date metadata so identical runs
produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "reusegate"

import matplotlib.pyplot as plt  # noqa: E402

_MODE_MARKERS = {"dynamic": "o", "copy": "s", "fusion": "D", "always_full": "^"}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def save_ablation_scatter(rows, path):
    """Accuracy vs compute scatter: J&F against FLOP ratio, one marker per
    gate mode, each point labeled with its threshold."""
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for mode in sorted({r["mode"] for r in rows}):
        pts = [r for r in rows if r["mode"] == mode]
        pts.sort(key=lambda r: r["flop_ratio"])
        ax.plot(
            [r["flop_ratio"] for r in pts],
            [r["JF"] for r in pts],
            marker=_MODE_MARKERS.get(mode, "x"),
            linestyle="--",
            linewidth=0.8,
            label=mode,
        )
        for r in pts:
            ax.annotate(
                f"{r['tau']:g}",
                (r["flop_ratio"], r["JF"]),
                textcoords="offset points",
                xytext=(4, 4),
                fontsize=7,
            )
    ax.set_xlabel("FLOP ratio vs always-full")
    ax.set_ylabel("J&F")
    ax.set_title("Accuracy vs compute across gate thresholds")
    ax.grid(True, alpha=0.3)
    ax.legend()
    _save(fig, path)


def save_histogram_chart(hist, path):
    """Bar chart of the consecutive-frame IoU distribution."""
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    edges = hist.edges()
    centers = [(lo + hi) / 2.0 for lo, hi in edges]
    ax.bar(centers, hist.fractions(), width=hist.bin_width * 0.92, color="#4878cf")
    ax.set_xlabel("IoU of consecutive ground-truth masks")
    ax.set_ylabel("fraction of pairs")
    ax.set_title(f"Consecutive-mask similarity ({hist.total} pairs)")
    ax.set_xlim(0.0, 1.0)
    ax.grid(True, axis="y", alpha=0.3)
    _save(fig, path)
