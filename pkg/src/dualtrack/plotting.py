"""Curve output: ``threshold,value`` CSV plus an SVG line plot."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import Curve  # noqa: E402

# fixed so repeated runs produce identical SVG bytes
_RC = {"svg.hashsalt": "dualtrack", "svg.fonttype": "none", "font.size": 9}


def write_curve_csv(path, curve: Curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "value"])
        for t, v in zip(curve.thresholds, curve.values):
            w.writerow([f"{t:.6g}", f"{v:.6f}"])


def read_curve_csv(path) -> tuple[list[float], list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["threshold", "value"]:
        raise ValueError(f"{path}: not a curve CSV")
    return [float(r[0]) for r in rows[1:]], [float(r[1]) for r in rows[1:]]


def plot_curve(path, curve: Curve, xlabel: str, title: str, label: str = "tracker") -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        ax.plot(curve.thresholds, curve.values, lw=1.5, label=f"{label} [{curve.auc:.3f}]")
        ax.set_xlim(curve.thresholds[0], curve.thresholds[-1])
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("fraction of frames")
        ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        fig.savefig(Path(path), format="svg", metadata={"Date": None})
        plt.close(fig)


def write_success(out_dir, curve: Curve, label: str = "tracker") -> None:
    out = Path(out_dir)
    write_curve_csv(out / "success.csv", curve)
    plot_curve(out / "success.svg", curve, "overlap threshold", "Success plot", label)


def write_precision(out_dir, curve: Curve, label: str = "tracker") -> None:
    out = Path(out_dir)
    write_curve_csv(out / "precision.csv", curve)
    plot_curve(out / "precision.svg", curve, "location error threshold (px)", "Precision plot", label)
