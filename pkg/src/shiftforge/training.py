"""SGD training loop, checkpoints, and ablation grids."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .data import augment_crop_flip, load_dataset
from .dynamics import DynamicsRecord, WeightSnapshot, snapshot_model
from .models import Model, build_model
from .regularization import alpha_at, lr_at, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "shiftforge-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""


class SGD:
    """Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v."""

    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.momentum = momentum
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        mu = np.float32(self.momentum)
        lr = np.float32(lr)
        for p in self.params:
            if p.grad is None:
                continue
            v = self.velocity[p.name]
            v *= mu
            v += p.grad
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(model: Model, opt: SGD, images, labels, lr: float, cfg: ExperimentConfig,
             epoch: int = 0) -> tuple[float, float]:
    """One optimization step on the full objective; returns (task loss, total loss)."""
    reg = cfg.regularizer()
    opt.zero_grad()
    try:
        logits = model.forward(ad.Tensor(images), training=True)
        task = ad.cross_entropy(logits, labels)
        loss = total_loss(task, model.l2_latents(reg.l2_on_s3_latents), model.sparse_latents(), reg,
                          epoch, cfg.epochs)
        loss.backward()
    except FloatingPointError as exc:
        raise TrainingDiverged(f"non-finite value at epoch {epoch} (lr={lr:g}): {exc}") from exc
    for p in opt.params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite gradient for {p.name} at epoch {epoch}")
    opt.step(lr)
    return task.item(), loss.item()


def evaluate(model: Model, images, labels, batch_size: int = 500) -> dict:
    top1 = top5 = 0
    k = model.spec.num_classes
    for i in range(0, len(images), batch_size):
        logits = model.forward(ad.Tensor(images[i : i + batch_size]), training=False).data
        y = labels[i : i + batch_size]
        order = np.argsort(-logits, axis=1, kind="stable")
        top1 += int(np.sum(order[:, 0] == y))
        if k >= 5:
            top5 += int(np.sum((order[:, :5] == y[:, None]).any(axis=1)))
    n = max(len(images), 1)
    return {"top1": 100.0 * top1 / n, "top5": 100.0 * top5 / n if k >= 5 else None}


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    FIELDS = ("epoch", "train_loss", "train_total_loss", "test_top1", "test_top5", "lr", "alpha", "seconds")

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("run log epochs must increase")
        self.rows.append(row)

    @property
    def final(self) -> dict:
        return self.rows[-1] if self.rows else {}

    def write(self, out_dir: Path) -> None:
        with open(out_dir / "runlog.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in self.FIELDS})
        (out_dir / "runlog.json").write_text(json.dumps({"rows": self.rows, "summary": self.summary}, indent=1))

    @classmethod
    def read(cls, out_dir) -> "RunLog":
        d = json.loads((Path(out_dir) / "runlog.json").read_text())
        return cls(d["rows"], d["summary"])


@dataclass
class TrainResult:
    log: RunLog
    record: DynamicsRecord
    model: Model
    output_dir: Path


def _rng_pair(seed: int):
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(data_ss)


def save_checkpoint(path, model: Model, opt: SGD, cfg: ExperimentConfig, epoch_done: int,
                    data_rng: np.random.Generator, runlog: RunLog) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch_done": epoch_done,
        "config": cfg.to_dict(),
        "modes": {name: layer.mode.kind for name, layer in model.layers.items()},
        "rng_state": data_rng.bit_generator.state,
        "runlog": runlog.rows,
    }
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    arrays.update({f"velocity/{k}": v for k, v in opt.velocity.items()})
    tmp = Path(path).with_suffix(".tmp.npz")
    np.savez(tmp, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    """Return dict with model, config, meta, velocity arrays."""
    with np.load(path) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path} is not a shiftforge checkpoint")
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
        velocity = {k[9:]: z[k] for k in z.files if k.startswith("velocity/")}
    cfg = ExperimentConfig.from_dict(meta["config"])
    model = build_model(cfg.model_spec(), 0)
    model.load_state_arrays(params)
    return {"model": model, "config": cfg, "meta": meta, "velocity": velocity}


def _load_data(cfg: ExperimentConfig):
    root = cfg.data_dir or None
    subset = cfg.subset_size or None
    xtr, ytr = load_dataset(cfg.dataset, "train", root, subset, cfg.verify_checksums)
    xte, yte = load_dataset(cfg.dataset, "test", root, None, cfg.verify_checksums)
    if cfg.train_limit:
        xtr, ytr = xtr[: cfg.train_limit], ytr[: cfg.train_limit]
    if cfg.test_limit:
        xte, yte = xte[: cfg.test_limit], yte[: cfg.test_limit]
    return xtr, ytr, xte, yte


def train(cfg: ExperimentConfig, resume: str | Path | None = None, stop_after: int | None = None,
          data=None) -> TrainResult:
    """Train per ``cfg``; writes config, run log, snapshots, metrics and a checkpoint to ``cfg.output_dir``.

    ``resume`` continues from a checkpoint written by an earlier call with the
    same config; ``stop_after`` ends the call after that many total epochs.
    ``data`` optionally supplies ``(x_train, y_train, x_test, y_test)``.
    """
    out = Path(cfg.output_dir)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.toml")
    xtr, ytr, xte, yte = data if data is not None else _load_data(cfg)

    init_rng, data_rng = _rng_pair(cfg.seed)
    runlog = RunLog()
    record = DynamicsRecord(latent_space=cfg.wsvr_latent_space)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        model = ck["model"]
        opt = SGD(model.parameters(), cfg.momentum)
        for k, v in ck["velocity"].items():
            opt.velocity[k][...] = v
        data_rng.bit_generator.state = ck["meta"]["rng_state"]
        start = ck["meta"]["epoch_done"]
        for row in ck["meta"]["runlog"]:
            runlog.append(row)
        for snap_path in sorted((out / "snapshots").glob("epoch_*.npz")):
            snap = WeightSnapshot.load(snap_path)
            if snap.epoch <= start:
                record.add(snap)
    else:
        model = build_model(cfg.model_spec(), init_rng)
        opt = SGD(model.parameters(), cfg.momentum)
        snap = snapshot_model(model, 0)
        snap.save(out / "snapshots" / "epoch_0000.npz")
        record.add(snap)

    schedule = cfg.lr_schedule_obj()
    reg = cfg.regularizer()
    augment = cfg.use_augmentation()
    last = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    bs = cfg.batch_size
    t_run = time.perf_counter()
    for epoch in range(start, last):
        t0 = time.perf_counter()
        lr = lr_at(schedule, epoch)
        order = data_rng.permutation(len(xtr))
        losses, totals = [], []
        for i in range(0, len(order), bs):
            idx = order[i : i + bs]
            if len(idx) < 2:
                continue
            xb = xtr[idx]
            if augment:
                xb = augment_crop_flip(xb, data_rng)
            task, tot = sgd_step(model, opt, xb, ytr[idx], lr, cfg, epoch)
            losses.append(task)
            totals.append(tot)
        acc = evaluate(model, xte, yte)
        row = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)),
            "train_total_loss": float(np.mean(totals)),
            "test_top1": acc["top1"],
            "test_top5": acc["top5"],
            "lr": lr,
            "alpha": alpha_at(reg, epoch, cfg.epochs),
            "seconds": time.perf_counter() - t0,
        }
        runlog.append(row)
        log.info("epoch %d/%d loss %.4f top1 %.2f (%.1fs)", epoch + 1, cfg.epochs, row["train_loss"],
                 row["test_top1"], row["seconds"])
        done = epoch + 1
        if done % cfg.snapshot_every == 0 or done == cfg.epochs:
            snap = snapshot_model(model, done)
            snap.save(out / "snapshots" / f"epoch_{done:04d}.npz")
            record.add(snap)
        if done % cfg.checkpoint_every == 0 or done == last:
            save_checkpoint(out / "checkpoint.npz", model, opt, cfg, done, data_rng, runlog)

    runlog.summary = {
        "epochs_completed": runlog.final.get("epoch", 0),
        "final_test_top1": runlog.final.get("test_top1"),
        "final_test_top5": runlog.final.get("test_top5"),
        "final_train_loss": runlog.final.get("train_loss"),
        "wall_clock_seconds": time.perf_counter() - t_run,
    }
    runlog.write(out)
    record.write_csv(out / "metrics.csv")
    record.write_histograms(out / "histograms.json")
    return TrainResult(runlog, record, model, out)


# ---------------------------------------------------------------- ablation

ABLATION_AXES = {
    "alpha": [1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
    "alpha_decay": ["none", "linear", "cosine"],
    "epochs": [30, 60, 90],
    "mode": ["fp32", "ternary", "deepshift", "s3_ternary", "s3_shift"],
}


def _ablation_run(args):
    cfg, tag = args
    res = train(cfg)
    return tag, res.log.summary


def ablate(base: ExperimentConfig, axes: dict, jobs: int = 1) -> list[dict]:
    """Cartesian grid over ``axes`` (name -> values); every run shares the base seed.

    Writes ``ablation.csv`` and a markdown table under ``base.output_dir``.
    """
    if not axes:
        raise ValueError("at least one ablation axis is required")
    for name, values in axes.items():
        if name not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {name!r}; expected one of {list(ABLATION_AXES)}")
        if not values:
            raise ValueError(f"ablation axis {name!r} has no values")
    root = Path(base.output_dir)
    names = list(axes)
    jobs_list = []
    for combo in itertools.product(*(axes[n] for n in names)):
        changes = dict(zip(names, combo))
        tag = "_".join(f"{k}={v}" for k, v in changes.items())
        cfg = base.replace(**changes, output_dir=str(root / tag))
        jobs_list.append((cfg, changes))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_ablation_run, jobs_list))
    else:
        results = [_ablation_run(j) for j in jobs_list]
    rows = [{**changes, **summary} for changes, summary in results]
    root.mkdir(parents=True, exist_ok=True)
    fields = names + ["final_test_top1", "final_test_top5", "final_train_loss", "epochs_completed"]
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    (root / "ablation.md").write_text(ablation_table(rows, names))
    return rows


def ablation_table(rows: list[dict], axes: list[str]) -> str:
    """Markdown table; two axes are pivoted (first axis as rows, second as columns)."""
    if len(axes) == 2:
        r_ax, c_ax = axes
        r_vals = list(dict.fromkeys(r[r_ax] for r in rows))
        c_vals = list(dict.fromkeys(r[c_ax] for r in rows))
        cell = {(r[r_ax], r[c_ax]): r for r in rows}
        lines = [f"| {r_ax} \\ {c_ax} | " + " | ".join(str(c) for c in c_vals) + " |",
                 "|---" * (len(c_vals) + 1) + "|"]
        for rv in r_vals:
            vals = [_acc(cell.get((rv, cv), {})) for cv in c_vals]
            lines.append(f"| {rv} | " + " | ".join(vals) + " |")
        return "\n".join(lines) + "\n"
    head = axes + ["top-1", "top-5", "train loss"]
    lines = ["| " + " | ".join(head) + " |", "|---" * len(head) + "|"]
    for r in rows:
        vals = [str(r[a]) for a in axes] + [
            _acc(r), _fmt(r.get("final_test_top5")), _fmt(r.get("final_train_loss"), 4)]
        lines.append("| " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n"


def _acc(r: dict) -> str:
    return _fmt(r.get("final_test_top1"))


def _fmt(v, digits: int = 2) -> str:
    return "-" if v is None else f"{v:.{digits}f}"
