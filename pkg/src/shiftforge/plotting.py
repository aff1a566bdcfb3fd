"""Figures for run directories: training curves, weight dynamics, histograms, ablation bars.

Everything reads back the CSV/JSON files a run writes, so a plot is always
regenerable from disk. Rendering uses the Agg backend and only writes files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .dynamics import DynamicsRecord  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 7,
    "legend.frameon": False,
}


def _num(v: str):
    return None if v in ("", None) else float(v)


def read_runlog_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _num(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def read_ablation_csv(path) -> tuple[list[str], list[dict]]:
    """Axis columns are everything before ``final_test_top1``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        rows = list(reader)
    axes = fields[: fields.index("final_test_top1")] if "final_test_top1" in fields else []
    return axes, rows


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(rows_by_label: dict, path) -> Path:
    """Training loss and test top-1 against epoch; one line per run label."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3))
        for label, rows in rows_by_label.items():
            ep = [r["epoch"] for r in rows]
            ax_loss.plot(ep, [r["train_loss"] for r in rows], marker=".", label=label)
            ax_acc.plot(ep, [r["test_top1"] for r in rows], marker=".", label=label)
        ax_loss.set(xlabel="epoch", ylabel="training loss")
        ax_acc.set(xlabel="epoch", ylabel="test top-1 (%)")
        ax_loss.legend()
        return _save(fig, path)


def plot_dynamics(record: DynamicsRecord, path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, (ax_s, ax_l) = plt.subplots(1, 2, figsize=(8, 3))
        for layer in record.layers:
            if record.wsvr[layer]:
                ax_s.plot(record.epochs[1:], record.wsvr[layer], lw=1, label=layer)
            ax_l.plot(record.epochs, record.wlvr[layer], lw=1, label=layer)
        ax_s.set(xlabel="epoch", ylabel="WSVR")
        ax_l.set(xlabel="epoch", ylabel="WLVR")
        if len(record.layers) <= 12:
            ax_l.legend(ncol=2)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_histograms(histograms: dict, path, layers=None, max_snapshots: int = 4) -> Path:
    """Latent-weight density for a few evenly spaced snapshots of each chosen layer."""
    layers = list(layers or histograms)[:6]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(layers), 1, figsize=(5, 1.8 * len(layers)), squeeze=False)
        for ax, layer in zip(axes[:, 0], layers):
            snaps = histograms[layer]
            picks = sorted(set(np.linspace(0, len(snaps) - 1, max_snapshots).round().astype(int)))
            for h in (snaps[i] for i in picks):
                ax.plot(h["centers"], h["density"], lw=1, label=f"epoch {h['epoch']}")
            ax.set_title(layer, fontsize=8)
            ax.legend()
        axes[-1, 0].set_xlabel("latent value")
        return _save(fig, path)


def plot_ablation(axes: list[str], rows: list[dict], path) -> Path:
    """Final test top-1 per grid point."""
    labels = [", ".join(f"{a}={r[a]}" for a in axes) for r in rows]
    acc = [float(r["final_test_top1"]) if r.get("final_test_top1") not in ("", None) else 0.0 for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(rows) + 2), 3))
        ax.bar(range(len(rows)), acc)
        ax.set_xticks(range(len(rows)), labels, rotation=45, ha="right")
        ax.set_ylabel("final test top-1 (%)")
        if acc:
            lo = min(acc)
            ax.set_ylim(max(0.0, lo - 5.0), min(100.0, max(acc) + 1.0))
        return _save(fig, path)


def render_run(run_dir, out_dir=None) -> list[Path]:
    """Render every figure a run (or an ablation root) directory supports; returns written paths."""
    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run / "figures"
    written = []
    if (run / "runlog.csv").exists():
        written.append(plot_training({run.name: read_runlog_csv(run / "runlog.csv")}, out / "training.png"))
    if (run / "metrics.csv").exists():
        rec = DynamicsRecord.from_csv(run / "metrics.csv")
        written.append(plot_dynamics(rec, out / "dynamics.png", title=run.name))
    if (run / "histograms.json").exists():
        hist = json.loads((run / "histograms.json").read_text())
        if hist:
            written.append(plot_histograms(hist, out / "histograms.png"))
    if (run / "ablation.csv").exists():
        axes, rows = read_ablation_csv(run / "ablation.csv")
        written.append(plot_ablation(axes, rows, out / "ablation.png"))
        curves = {p.name: read_runlog_csv(p / "runlog.csv") for p in sorted(run.iterdir())
                  if (p / "runlog.csv").exists()}
        if curves:
            written.append(plot_training(curves, out / "ablation_curves.png"))
    if not written:
        raise FileNotFoundError(f"{run} has no runlog.csv, metrics.csv, histograms.json or ablation.csv")
    return written
