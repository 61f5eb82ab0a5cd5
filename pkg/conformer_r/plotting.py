"""
Loss-curve figure from a metrics CSV.
"""
from pathlib import Path
from typing import Dict, List, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from conformer_r.storage import read_csv_rows  # noqa: E402
from conformer_r.training import smooth_series  # noqa: E402

PathLike = Union[str, Path]

CURVES = ("loss", "loss_ctc", "loss_aed", "loss_kl")


def read_curves(metrics_csv: PathLike) -> Dict[str, List[float]]:
    rows = read_csv_rows(metrics_csv)
    curves = {"step": [float(r["step"]) for r in rows]}
    for name in CURVES:
        curves[name] = [float(r[name]) for r in rows]
    return curves


def plot_losses(metrics_csv: PathLike, out_png: PathLike, factor: float = 0.5) -> Path:
    """Raw (faint) and smoothed curves, one panel per loss term."""
    curves = read_curves(metrics_csv)
    fig, axes = plt.subplots(len(CURVES), 1, sharex=True, figsize=(6.0, 2.2 * len(CURVES)))
    for ax, name in zip(axes, CURVES):
        ax.plot(curves["step"], curves[name], color="0.75", linewidth=0.8, label="raw")
        ax.plot(curves["step"], smooth_series(curves[name], factor), color="C0", linewidth=1.2,
                label=f"smoothed ({factor})")
        ax.set_ylabel(name)
        ax.grid(True, alpha=0.3)
    axes[0].legend(loc="upper right", fontsize="small", frameon=False)
    axes[-1].set_xlabel("step")
    fig.tight_layout()
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
