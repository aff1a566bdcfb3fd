"""Weight-dynamics instrumentation: sign variation, low-value rate, histograms."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

WLVR_THRESHOLD = 0.02


@dataclass
class WeightSnapshot:
    """Per-layer weights at one epoch.

    ``weights`` are the effective (forward) weights, ``latents`` the values
    fed to the quantizer, ``discrete`` flags layers whose effective weights
    take discrete values.
    """

    epoch: int
    weights: dict
    latents: dict
    discrete: dict
    sparse: dict = field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {}
        for k, v in self.weights.items():
            arrays[f"weight/{k}"] = v
        for k, v in self.latents.items():
            arrays[f"latent/{k}"] = v
        for k, v in self.sparse.items():
            arrays[f"sparse/{k}"] = v
        meta = json.dumps({"epoch": self.epoch, "discrete": self.discrete, "layers": list(self.weights)})
        np.savez_compressed(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "WeightSnapshot":
        with np.load(path) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            get = lambda prefix: {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith(prefix + "/")}  # noqa: E731
            return cls(meta["epoch"], get("weight"), get("latent"), meta["discrete"], get("sparse"))


def snapshot_model(model, epoch: int) -> WeightSnapshot:
    weights, latents, discrete, sparse = {}, {}, {}, {}
    for name, layer in model.layers.items():
        weights[name] = layer.effective_values()
        latents[name] = np.array(layer.histogram_latent(), copy=True)
        discrete[name] = layer.mode.discrete_set is not None
        if layer.s3 is not None:
            sparse[name] = layer.s3.w_sparse.data.copy()
    return WeightSnapshot(epoch, weights, latents, discrete, sparse)


def _values(snap: WeightSnapshot, layer: str, latent_space: bool) -> np.ndarray:
    return snap.latents[layer] if latent_space else snap.weights[layer]


def wsvr(prev: WeightSnapshot, nxt: WeightSnapshot, layer: str, latent_space: bool = False) -> float:
    """Fraction of positions whose sign state in {-1, 0, +1} differs between snapshots."""
    a = _values(prev, layer, latent_space)
    b = _values(nxt, layer, latent_space)
    return sign_change_rate(a, b)


def sign_change_rate(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"snapshot shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean(np.sign(a) != np.sign(b)))


def low_value_rate(w: np.ndarray, discrete: bool, threshold: float = WLVR_THRESHOLD) -> float:
    if w.size == 0:
        raise ValueError("empty layer")
    if discrete:
        return float(np.mean(w == 0))
    peak = float(np.max(np.abs(w)))
    if peak == 0.0:
        return 1.0
    return float(np.mean(np.abs(w) / peak <= threshold))


def wlvr(snap: WeightSnapshot, layer: str, mode: str | None = None, threshold: float = WLVR_THRESHOLD) -> float:
    """Continuous: share of |w|/max|w| <= threshold. Discrete: share of exact zeros."""
    discrete = snap.discrete[layer] if mode is None else mode == "discrete"
    return low_value_rate(snap.weights[layer], discrete, threshold)


def weight_histogram(values: np.ndarray, bins: int = 50, value_range=None) -> dict:
    """Density polygon of ``values``: bin centers, densities, and per-bin mass."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    v = np.asarray(values, dtype=np.float64).ravel()
    counts, edges = np.histogram(v, bins=bins, range=value_range)
    mass = counts / max(v.size, 1)
    width = np.diff(edges)
    return {
        "centers": ((edges[:-1] + edges[1:]) / 2).tolist(),
        "density": (mass / width).tolist(),
        "mass": mass.tolist(),
    }


def spearman(series) -> float:
    """Rank correlation of ``series`` against its index; 0.0 when undefined (ties everywhere)."""
    y = np.asarray(series, dtype=np.float64)
    if y.size < 2 or np.all(y == y[0]):
        return 0.0
    rho = stats.spearmanr(np.arange(y.size), y).statistic
    return 0.0 if np.isnan(rho) else float(rho)


class DynamicsRecord:
    """Per-layer WSVR / WLVR series and histograms, grown one snapshot at a time."""

    def __init__(self, latent_space: bool = False, threshold: float = WLVR_THRESHOLD, bins: int = 50):
        self.latent_space = latent_space
        self.threshold = threshold
        self.bins = bins
        self.epochs: list[int] = []
        self.wsvr: dict[str, list] = {}
        self.wlvr: dict[str, list] = {}
        self.histograms: dict[str, list] = {}
        self._last: WeightSnapshot | None = None

    @property
    def layers(self) -> list[str]:
        return list(self.wlvr)

    def add(self, snap: WeightSnapshot) -> None:
        if self._last is not None and set(snap.weights) != set(self._last.weights):
            raise ValueError("snapshot layer names differ from earlier snapshots")
        self.epochs.append(snap.epoch)
        for layer in snap.weights:
            self.wlvr.setdefault(layer, []).append(wlvr(snap, layer, threshold=self.threshold))
            self.histograms.setdefault(layer, []).append(
                {"epoch": snap.epoch, **weight_histogram(snap.latents[layer], self.bins)}
            )
            if self._last is not None:
                self.wsvr.setdefault(layer, []).append(wsvr(self._last, snap, layer, self.latent_space))
            else:
                self.wsvr.setdefault(layer, [])
        self._last = snap

    def rows(self):
        for i, epoch in enumerate(self.epochs):
            for layer in self.layers:
                w = self.wsvr[layer][i - 1] if i > 0 else ""
                yield {"epoch": epoch, "layer": layer, "wsvr": w, "wlvr": self.wlvr[layer][i]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "layer", "wsvr", "wlvr"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow(row)

    def write_histograms(self, path) -> None:
        Path(path).write_text(json.dumps(self.histograms))

    @classmethod
    def from_csv(cls, path) -> "DynamicsRecord":
        rec = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                epoch, layer = int(row["epoch"]), row["layer"]
                if not rec.epochs or rec.epochs[-1] != epoch:
                    rec.epochs.append(epoch)
                rec.wlvr.setdefault(layer, []).append(float(row["wlvr"]))
                rec.wsvr.setdefault(layer, [])
                if row["wsvr"] != "":
                    rec.wsvr[layer].append(float(row["wsvr"]))
        return rec


def trend_stats(record: DynamicsRecord, start_fraction: float = 0.0) -> dict:
    """Mean WSVR and WLVR-vs-epoch Spearman correlation, per layer and averaged.

    ``start_fraction`` drops the earliest transitions from the WSVR mean, e.g.
    1/3 keeps the final two thirds of training.
    """
    if len(record.epochs) < 3:
        raise ValueError(f"need at least 3 snapshots, have {len(record.epochs)}")
    per_layer = {}
    first = record.epochs[0]
    span = record.epochs[-1] - first
    cutoff = first + start_fraction * span
    for layer in record.layers:
        w = np.asarray(record.wsvr[layer], dtype=np.float64)
        ends = np.asarray(record.epochs[1:], dtype=np.float64)
        keep = w[ends > cutoff] if start_fraction > 0 else w
        per_layer[layer] = {
            "wsvr_mean": float(keep.mean()) if keep.size else 0.0,
            "wlvr_spearman": spearman(record.wlvr[layer]),
        }
    return {
        "wsvr_mean": float(np.mean([v["wsvr_mean"] for v in per_layer.values()])),
        "wlvr_spearman": float(np.mean([v["wlvr_spearman"] for v in per_layer.values()])),
        "layers": per_layer,
    }
