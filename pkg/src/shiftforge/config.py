"""Flat key = value experiment configuration."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .layers import WeightMode
from .models import ModelSpec
from .regularization import LrSchedule, RegularizerConfig


@dataclass
class ExperimentConfig:
    # model
    architecture: str = "cnn_mnist"
    mode: str = "fp32"
    shift_bits: int = 2
    first_layer_fp32: bool = True
    last_layer_quantized: bool = True
    dense_prior: bool = True
    ste_clip: float = 1.0
    ternary_delta: float = 0.0  # 0 -> 0.7 * mean|w| recomputed each forward
    ternary_scale: bool = False
    deepshift_p_min: int = 0
    deepshift_p_max: int = 2
    # optimization
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    alpha: float = 1e-5
    alpha_decay: str = "none"
    lam: float = 1e-4
    l2_on_s3_latents: bool = True
    seed: int = 0
    # data
    dataset: str = "mnist"
    subset_size: int = 0  # 0 -> dataset default (5000 for cifar10_subset)
    train_limit: int = 0  # 0 -> whole split
    test_limit: int = 0
    augment: str = "auto"  # auto | on | off
    data_dir: str = ""  # empty -> $SHIFTFORGE_DATA or ./data
    verify_checksums: bool = True
    # outputs
    output_dir: str = "runs/default"
    snapshot_every: int = 1
    wsvr_latent_space: bool = False
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.augment not in ("auto", "on", "off"):
            raise ValueError("augment must be auto, on or off")
        # construct the nested configs once to validate them
        self.model_spec()
        self.regularizer()
        self.lr_schedule_obj()

    def weight_mode(self) -> WeightMode:
        return WeightMode(
            kind=self.mode,
            t=self.shift_bits,
            clip=self.ste_clip,
            ternary_delta=self.ternary_delta or None,
            ternary_scale=self.ternary_scale,
            p_min=self.deepshift_p_min,
            p_max=self.deepshift_p_max,
            dense_prior=self.dense_prior,
        )

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            self.architecture,
            self.weight_mode(),
            first_layer_fp32=self.first_layer_fp32,
            last_layer_quantized=self.last_layer_quantized,
        )

    def regularizer(self) -> RegularizerConfig:
        return RegularizerConfig(self.alpha, self.lam, self.alpha_decay, self.l2_on_s3_latents)

    def lr_schedule_obj(self) -> LrSchedule:
        return LrSchedule(self.lr, self.epochs, self.lr_schedule)

    def use_augmentation(self) -> bool:
        if self.augment == "auto":
            return self.dataset.startswith("cifar10")
        return self.augment == "on"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # file form uses "lambda" for the l2 coefficient
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        typed = {}
        for k, v in d.items():
            typed[k] = _coerce(v, known[k].type)
        return cls(**typed)

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(tomllib.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())


PRESETS = {
    # shift-network training defaults
    "shift": {"lr": 1e-3, "lr_schedule": "cosine", "momentum": 0.9, "lam": 1e-4, "alpha": 1e-5},
    # desk-scale MNIST CNN comparison; one shared learning rate for every mode
    "desk_mnist": {"lr": 0.3, "lr_schedule": "cosine", "momentum": 0.9, "lam": 1e-4, "alpha": 1e-5,
                   "architecture": "cnn_mnist", "dataset": "mnist", "epochs": 10},
    # weight-dynamics study defaults
    "dynamics": {"lr": 0.1, "lr_schedule": "cosine", "momentum": 0.9, "lam": 1e-4, "alpha": 1e-5,
                 "architecture": "resnet20_cifar", "dataset": "cifar10_subset", "epochs": 30},
}


def preset(name: str, **overrides) -> ExperimentConfig:
    return ExperimentConfig(**{**PRESETS[name], **overrides})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _coerce(v, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "bool":
        if isinstance(v, str):
            if v.lower() not in ("true", "false"):
                raise ValueError(f"not a boolean: {v!r}")
            return v.lower() == "true"
        return bool(v)
    if typ == "int":
        return int(v)
    if typ == "float":
        return float(v)
    return str(v)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with a TOML-typed value; bare words are taken as strings."""
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override must look like key=value, got {text!r}")
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value
