"""Figure rendering for run reports.

Every report path writes machine-readable output first (JSON, delimited
text); these helpers render the matching matplotlib figures next to them.
The Agg backend keeps rendering headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(history: list[dict], path: str) -> str:
    """Loss curves per round; a second panel for ranking metrics when the
    history carries interleaved validation results."""
    rounds = [h["round"] for h in history]
    with_valid = [h for h in history if "valid_hr" in h]
    n_panels = 2 if with_valid else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(5.5 * n_panels, 4.0))
    axes = np.atleast_1d(axes)

    ax = axes[0]
    for key, label in [("local_bpr", "client ranking loss"),
                       ("server_bpr", "server ranking loss"),
                       ("server_cl", "server contrastive loss")]:
        if any(key in h for h in history):
            ax.plot(rounds, [h.get(key, float("nan")) for h in history],
                    marker="o", markersize=3, label=label)
    ax.set_xlabel("round")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)

    if with_valid:
        ax = axes[1]
        ks = sorted(with_valid[0]["valid_hr"], key=int)
        for k in ks:
            ax.plot([h["round"] for h in with_valid],
                    [h["valid_hr"][k] for h in with_valid],
                    marker="o", markersize=3, label=f"HR@{k}")
        ax.set_xlabel("round")
        ax.set_ylabel("validation hit ratio")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_metric_bars(report: dict, path: str) -> str:
    """Grouped bars of mean HR@K and NDCG@K for one evaluation report."""
    ks = sorted(report["mean_hr"], key=int)
    x = np.arange(len(ks))
    width = 0.38
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.bar(x - width / 2, [report["mean_hr"][k] for k in ks], width,
           label="HR@K")
    ax.bar(x + width / 2, [report["mean_ndcg"][k] for k in ks], width,
           label="NDCG@K")
    ax.set_xticks(x, [f"K={k}" for k in ks])
    ax.set_ylabel("mean over evaluated users")
    ax.set_title(f"ranking quality ({report['phase']})")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_forgetting_figure(report: dict, path: str) -> str:
    """Cosine-to-forgotten-views bars before/after plus the rank shift."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8.5, 4.0))
    ax0.bar(["before", "after"],
            [report["mean_cos_before"], report["mean_cos_after"]],
            color=["#888888", "#3b6ea5"])
    ax0.set_ylabel("mean cosine to forgotten views")
    ax0.grid(axis="y", alpha=0.3)
    ax1.bar(["rank shift"], [report["mean_rank_shift"]], color="#3b6ea5")
    ax1.axhline(0.0, color="black", linewidth=0.8)
    ax1.set_ylabel("mean rank change of withdrawn items")
    ax1.grid(axis="y", alpha=0.3)
    fig.suptitle(
        f"forgetting over {report['withdrawn_items']} withdrawn items, "
        f"{report['requesting_users']} requesting users", fontsize=10,
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_storage_figure(reports: list[dict], path: str) -> str:
    """Log-scale bars of bytes kept per unlearning strategy."""
    names = [r["method"] for r in reports]
    sizes = [max(r["bytes"], 0) for r in reports]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    bars = ax.bar(names, sizes, color="#3b6ea5")
    if any(s > 0 for s in sizes):
        ax.set_yscale("symlog")
    for bar, size in zip(bars, sizes):
        ax.annotate(f"{size:,}", (bar.get_x() + bar.get_width() / 2, size),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("bytes of stored history")
    ax.tick_params(axis="x", labelrotation=15)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
