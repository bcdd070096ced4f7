"""Figure rendering for the compare report."""

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_PERCENTILE_COLORS = {10: "tab:green", 50: "tab:blue", 95: "tab:orange", 99: "tab:red"}


def save_distance_plot(report, path, title="Pairwise Hausdorff distances"):
    """Log-scaled distribution of pair distances with percentile markers."""
    d = np.asarray(report.pair_distances, dtype=np.float64)
    floor = 1e-9
    logd = np.log10(np.maximum(d, floor))
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if len(d) > 1:
        ax.violinplot(logd, positions=[0.0], widths=0.8, showextrema=False)
    ax.scatter(
        np.zeros_like(logd), logd, s=6, alpha=0.25, color="0.4", label="_pairs"
    )
    for rank, value in sorted(report.percentiles.items()):
        ax.axhline(
            np.log10(max(value, floor)),
            color=_PERCENTILE_COLORS.get(rank, "k"),
            linestyle="--",
            linewidth=1.2,
            label=f"p{rank} = {value:.4g} mm",
        )
    ax.set_xticks([])
    ax.set_ylabel("log10 distance (mm)")
    ax.set_title(f"{title} (n={len(d)}, {report.count_below_1mm} below 1 mm)")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
