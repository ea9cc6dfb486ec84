"""Figure rendering for CLI reports.

Every report-writing subcommand drops a PNG next to its delimited text
output. Rendering is headless and metadata is pinned so reruns produce
identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .mmd import MmdReport
from .model import EpochStats, EvalReport

_SAVE_KWARGS = {"dpi": 120, "metadata": {"Software": "gera"}}


def save_history_figure(history: list[EpochStats], path: str | Path) -> None:
    """Training loss and validation RMSE per epoch (timing omitted)."""
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(epochs, [h.train_loss for h in history], color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h.val_rmse for h in history], color="tab:red", label="val RMSE")
    ax2.set_ylabel("validation RMSE (mm)", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def save_mmd_figure(coord: MmdReport, geo: MmdReport, path: str | Path) -> None:
    """Batch-pair MMD^2 distributions for both encodings."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for pos, report, color in ((0, coord, "tab:orange"), (1, geo, "tab:green")):
        x = np.full(report.values.shape, pos, dtype=float)
        x += np.linspace(-0.15, 0.15, num=len(report.values))
        ax.plot(x, report.values, "o", color=color, alpha=0.6, markersize=4)
        ax.hlines(report.mean, pos - 0.25, pos + 0.25, color=color, linewidth=2)
    ax.set_xticks([0, 1], [coord.encoding, geo.encoding])
    ax.set_ylabel("MMD$^2$ between batches")
    ax.set_title(f"encoding stability (sigma = {coord.sigma:.4g})")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def save_eval_figure(report: EvalReport, per_pair: list[tuple[float, float]], path: str | Path) -> None:
    """Per-pair RMSE and Chamfer distance bars with split means."""
    rmse = [r for r, _ in per_pair]
    cd = [c for _, c in per_pair]
    idx = np.arange(len(per_pair))
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.bar(idx - 0.2, rmse, width=0.4, label=f"RMSE (mean {report.rmse_mm:.2f} mm)")
    ax.bar(idx + 0.2, cd, width=0.4, label=f"CD (mean {report.cd_mm:.2f} mm)")
    ax.set_xlabel("test pair")
    ax.set_ylabel("mm")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
