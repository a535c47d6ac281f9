"""Curve data files and rendered figures for a run directory.

The CSV writers keep the training path headless; figures are rendered on
demand from ``metrics.jsonl`` records with the Agg backend.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("total", "class", "adv", "ent", "recon", "diff")


def write_weights_curve(records, path):
    """One row per (epoch, candidate threshold): the between-cluster variance curve."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "t", "delta_sq", "chosen"])
        for rec in records:
            cw = rec["class_weights"]
            for t, v in cw.get("variance_curve", []):
                writer.writerow([rec["epoch"], repr(float(t)), repr(float(v)), int(t == cw.get("threshold"))])
    return path


def read_weights_curve(path):
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "t": float(r["t"]), "delta_sq": float(r["delta_sq"]),
                 "chosen": bool(int(r["chosen"]))} for r in csv.DictReader(fh)]


def plot_weights_curve(records, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = False
    for rec in records:
        curve = rec["class_weights"].get("variance_curve") or []
        if not curve:
            continue
        ts, vs = zip(*curve)
        ax.plot(ts, vs, marker="o", ms=3, label=f"epoch {rec['epoch']}")
        t = rec["class_weights"].get("threshold")
        if t is not None:
            ax.axvline(t, color=ax.lines[-1].get_color(), ls=":", lw=0.8)
        drawn = True
    if not drawn:
        ax.text(0.5, 0.5, "no binarization yet", ha="center", va="center", transform=ax.transAxes)
    else:
        ax.legend(fontsize=7)
    ax.set_xlabel("threshold t")
    ax.set_ylabel("between-cluster variance")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_class_weights(record, path):
    """Final soft weights as bars, shared classes highlighted, threshold dashed."""
    cw = record["class_weights"]
    soft, hard = cw["soft"], cw.get("hard") or [1] * len(cw["soft"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    colors = ["tab:blue" if h else "tab:gray" for h in hard]
    ax.bar(range(len(soft)), soft, color=colors)
    if cw.get("threshold") is not None:
        ax.axhline(cw["threshold"], color="tab:red", ls="--", lw=1, label=f"t = {cw['threshold']:.4f}")
        ax.legend(fontsize=8)
    ax.set_xlabel("source class")
    ax.set_ylabel("soft weight")
    ax.set_title(f"class weights after epoch {record['epoch']}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_losses(records, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in records]
    for key in LOSS_KEYS:
        values = [r["loss"].get(key, 0.0) for r in records]
        if any(values):
            ax.plot(epochs, values, marker="o", ms=3, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("epoch-mean loss")
    if records:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def render_run(records, run_dir):
    """Write every figure for ``records`` into ``run_dir``; returns the paths."""
    run_dir = Path(run_dir)
    paths = [plot_weights_curve(records, run_dir / "weights_curve.png"),
             plot_losses(records, run_dir / "losses.png")]
    if records:
        paths.append(plot_class_weights(records[-1], run_dir / "class_weights.png"))
    return paths
