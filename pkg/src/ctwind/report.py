"""PNG figures for the metric tables written by the evaluation stage."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

__all__ = ["plot_avg_rel_mse", "plot_decision_costs", "plot_mcb", "render_all"]

log = logging.getLogger(__name__)

_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_avg_rel_mse(avg: pd.DataFrame, path) -> Path:
    """One line per approach across levels; the benchmark sits at 1."""
    df = avg.set_index("approach") if "approach" in avg.columns else avg
    levels = [c for c in df.columns if c != "All"]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    x = np.arange(len(levels))
    for name, row in df.iterrows():
        ax.plot(x, row[levels].to_numpy(float), marker="o", ms=3, label=f"{name} (All {row['All']:.3f})")
    ax.axhline(1.0, color="grey", lw=0.8, ls="--")
    ax.set_xticks(x, levels)
    ax.set_xlabel("level (minutes)")
    ax.set_ylabel("AvgRelMSE")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_decision_costs(costs: pd.DataFrame, path, delta: float) -> Path:
    """delta- against delta+ per decision level, one point per approach."""
    df = costs[np.isclose(costs["delta"], delta)]
    levels = sorted(df["level_minutes"].unique())
    fig, axes = plt.subplots(1, max(len(levels), 1), figsize=(4 * max(len(levels), 1), 4), squeeze=False)
    for ax, lvl in zip(axes[0], levels):
        part = df[df["level_minutes"] == lvl]
        ax.scatter(part["delta_minus"], part["delta_plus"], s=18)
        for _, row in part.iterrows():
            ax.annotate(row["approach"], (row["delta_minus"], row["delta_plus"]), fontsize=6)
        ax.set_title(f"{lvl} min")
        ax.set_xlabel("delta- (fines)")
        ax.set_ylabel("delta+ (revenue loss)")
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_mcb(mcb: pd.DataFrame, path) -> Path:
    """Mean ranks with their MCB intervals; the best interval is shaded."""
    df = mcb.sort_values("mean_rank")
    y = np.arange(len(df))
    fig, ax = plt.subplots(figsize=(6, 0.4 * len(df) + 1.5))
    ax.errorbar(
        df["mean_rank"], y,
        xerr=[df["mean_rank"] - df["lower"], df["upper"] - df["mean_rank"]],
        fmt="o", capsize=3,
    )
    if len(df):
        ax.axvspan(df["lower"].iloc[0], df["upper"].iloc[0], color="grey", alpha=0.2)
    ax.set_yticks(y, df["approach"])
    ax.set_xlabel("mean rank")
    fig.tight_layout()
    return _save(fig, Path(path))


def render_all(tables: dict, out_dir, delta: float = 0.01) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [plot_avg_rel_mse(tables["avg_rel_mse"], out_dir / "avg_rel_mse.png")]
    if len(tables["decision_costs"]):
        paths.append(plot_decision_costs(tables["decision_costs"], out_dir / "decision_costs.png", delta))
    if len(tables["mcb"]):
        paths.append(plot_mcb(tables["mcb"], out_dir / "mcb.png"))
    log.info("wrote %d figures to %s", len(paths), out_dir)
    return paths
