"""``shiftforge`` command line.

Reports go to stdout as tab-separated ``key<TAB>value`` lines or as
tab-separated tables with a header row; figures go to files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import shift_inference as si
from .config import PRESETS, ExperimentConfig, parse_override
from .data import DatasetError, load_dataset
from .dynamics import DynamicsRecord, trend_stats


def _emit(pairs) -> None:
    for k, v in pairs:
        print(f"{k}\t{_cell(v)}")


def _emit_table(header, rows) -> None:
    print("\t".join(header))
    for r in rows:
        print("\t".join(_cell(r.get(h)) for h in header))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _config(args) -> ExperimentConfig:
    base = dict(PRESETS[args.preset]) if args.preset else {}
    if args.config:
        base.update(ExperimentConfig.load(args.config).to_dict())
    for text in args.set or []:
        k, v = parse_override(text)
        base[k] = v
    if getattr(args, "output_dir", None):
        base["output_dir"] = args.output_dir
    return ExperimentConfig.from_dict(base)


def cmd_train(args) -> int:
    from .training import train

    cfg = _config(args)
    res = train(cfg, resume=args.resume)
    _emit_table(["epoch", "train_loss", "test_top1", "test_top5", "lr", "alpha", "seconds"], res.log.rows)
    _emit(("summary." + k, v) for k, v in res.log.summary.items())
    _emit([("output_dir", res.output_dir)])
    return 0


def _axis_values(name: str, text: str | None):
    from .training import ABLATION_AXES

    if text is None:
        return ABLATION_AXES[name]
    kind = type(ABLATION_AXES[name][0])
    return [kind(v.strip()) for v in text.split(",") if v.strip()]


def cmd_ablate(args) -> int:
    from .training import ablate

    cfg = _config(args)
    values = list(args.values or [])
    if values and len(values) != len(args.axis):
        raise SystemExit("--values must be given once per --axis (or not at all)")
    axes = {name: _axis_values(name, values[i] if values else None) for i, name in enumerate(args.axis)}
    rows = ablate(cfg, axes, jobs=args.jobs)
    _emit_table(list(axes) + ["final_test_top1", "final_test_top5", "final_train_loss"], rows)
    return 0


def cmd_metrics(args) -> int:
    from .plotting import read_runlog_csv, render_run

    run = Path(args.run)
    if (run / "runlog.csv").exists():
        rows = read_runlog_csv(run / "runlog.csv")
        if rows:
            _emit(("final." + k, v) for k, v in rows[-1].items())
    if (run / "metrics.csv").exists():
        rec = DynamicsRecord.from_csv(run / "metrics.csv")
        _emit_table(["epoch", "layer", "wsvr", "wlvr"], list(rec.rows()))
        if len(rec.epochs) >= 3:
            st = trend_stats(rec, start_fraction=args.start_fraction)
            _emit([("mean_wsvr", st["wsvr_mean"]), ("mean_wlvr_spearman", st["wlvr_spearman"])])
    if not args.no_plot:
        for p in render_run(run, args.figures):
            _emit([("figure", p)])
    return 0


def cmd_export(args) -> int:
    from .training import load_checkpoint

    ck_path = Path(args.checkpoint) if args.checkpoint else Path(args.run) / "checkpoint.npz"
    model = load_checkpoint(ck_path)["model"]
    out = Path(args.out) if args.out else ck_path.with_name("model.s3w")
    packed = si.export_model(model)
    size = packed.save(out)
    ops = si.count_ops(packed)
    _emit([("weights", out), ("bytes", size), ("t", packed.t)])
    _emit_table(["layer", "storage", "shape"],
                [{"layer": n, "storage": "packed3" if l.packed else "float32", "shape": "x".join(map(str, l.shape))}
                 for n, l in packed.layers.items()])
    _emit(("ops." + k, v) for k, v in ops.as_dict().items())
    return 0


def _load_input(spec: str, limit: int, root):
    """``path.npy`` (labels optional via ``path.labels.npy``) or ``dataset[:split]``."""
    p = Path(spec)
    if p.suffix == ".npy":
        x = np.load(p)
        lab = p.with_name(p.stem + ".labels.npy")
        y = np.load(lab) if lab.exists() else None
    else:
        name, _, split = spec.partition(":")
        x, y = load_dataset(name, split or "test", root)
    if limit:
        x = x[:limit]
        y = None if y is None else y[:limit]
    return x, y


def cmd_infer(args) -> int:
    packed = si.PackedModel.load(args.weights)
    x, y = _load_input(args.input, args.limit, args.data_dir)
    res = si.shift_forward(packed, x, frac_bits=args.frac_bits)
    ref = si.reference_forward(packed, x)
    pred = res.logits.argmax(axis=1)
    pairs = [
        ("images", len(x)),
        ("frac_bits", args.frac_bits),
        ("max_abs_error_vs_reference", float(np.abs(res.logits - ref).max(initial=0.0))),
        ("error_bound", res.error_bound),
        ("top1_agreement_vs_reference", float(np.mean(pred == ref.argmax(axis=1))) if len(x) else None),
    ]
    if y is not None:
        pairs.append(("top1_accuracy", float(np.mean(pred == y)) * 100.0))
    pairs += [("ops." + k, v) for k, v in si.count_ops(packed).as_dict().items()]
    _emit(pairs)
    if args.predictions:
        np.savetxt(args.predictions, pred, fmt="%d")
    return 0


def cmd_plot(args) -> int:
    from .plotting import render_run

    for p in render_run(args.run, args.out):
        _emit([("figure", p)])
    return 0


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a documented preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--output-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    _config_args(p)
    p.add_argument("--resume", help="checkpoint.npz to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="grid of runs over one or more axes")
    _config_args(p)
    p.add_argument("--axis", action="append", required=True, choices=["alpha", "alpha_decay", "epochs", "mode"])
    p.add_argument("--values", action="append", help="comma-separated values for the matching --axis")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="print run metrics and render figures")
    p.add_argument("--run", required=True)
    p.add_argument("--start-fraction", type=float, default=1 / 3, help="WSVR mean skips this leading fraction")
    p.add_argument("--figures", help="figure directory (default RUN/figures)")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export", help="pack a checkpoint into an .s3w file")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--run")
    g.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("infer", help="fixed-point shift inference from an .s3w file")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help="images .npy, or a dataset name such as mnist:test")
    p.add_argument("--frac-bits", type=int, default=si.DEFAULT_FRAC_BITS)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--data-dir")
    p.add_argument("--predictions", help="write predicted classes, one per line")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plot", help="render figures for a run or ablation directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except (DatasetError, si.FormatError, si.PackError, FileNotFoundError, KeyError, ValueError, OverflowError) as exc:
        print(f"shiftforge {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
