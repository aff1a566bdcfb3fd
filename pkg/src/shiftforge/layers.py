"""Quantization-aware linear/conv layers and batch norm."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import quantizers as qz
from .autodiff import Tensor

MODES = ("fp32", "ternary", "deepshift", "s3_ternary", "s3_shift")


@dataclass(frozen=True)
class WeightMode:
    """How a layer turns its latents into the weight used in forward."""

    kind: str = "fp32"
    t: int = 2
    clip: float = qz.DEFAULT_CLIP
    ternary_delta: float | None = None
    ternary_scale: bool = False
    p_min: int = 0
    p_max: int = 2
    dense_prior: bool = True

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"unknown weight mode {self.kind!r}; expected one of {MODES}")
        if self.kind == "s3_shift" and self.t < 1:
            raise ValueError("s3_shift needs t >= 1")

    @property
    def quantized(self) -> bool:
        return self.kind != "fp32"

    @property
    def discrete_set(self) -> set | None:
        if self.kind == "fp32" or (self.kind == "ternary" and self.ternary_scale):
            return None
        if self.kind in ("ternary", "s3_ternary"):
            return {-1.0, 0.0, 1.0}
        if self.kind == "s3_shift":
            return qz.s3_codomain(self.t)
        return {0.0} | {s * 2.0**p for p in range(self.p_min, self.p_max + 1) for s in (1.0, -1.0)}

    @property
    def shift_bits(self) -> int:
        """Largest shift amount any effective weight can carry."""
        if self.kind == "s3_shift":
            return self.t
        if self.kind == "deepshift":
            return self.p_max
        return 0

    @property
    def ste(self) -> qz.SteConfig:
        if self.kind == "deepshift":
            # latents live on the scale of the largest power of two
            return qz.SteConfig(max(self.clip, 2.0**self.p_max * math.sqrt(2.0)))
        return qz.SteConfig(self.clip)


FP32 = WeightMode("fp32")


class QuantLayer:
    """Shared latent handling for :class:`QuantLinear` and :class:`QuantConv2d`."""

    def __init__(self, name: str, weight_shape: tuple, fan_in: int, mode: WeightMode,
                 rng: np.random.Generator, bias_features: int | None = None):
        self.name = name
        self.mode = mode
        self.weight_shape = tuple(weight_shape)
        self.latents: dict[str, Tensor] = {}
        self.last_weight: Tensor | None = None
        if mode.kind in ("s3_ternary", "s3_shift"):
            t = mode.t if mode.kind == "s3_shift" else 0
            s3 = qz.init_s3(self.weight_shape, rng, t=t, dense_prior=mode.dense_prior)
            self.s3 = s3
            for lat in s3.latents():
                self.latents[lat.name] = lat
        else:
            self.s3 = None
            if mode.kind == "deepshift":
                half = 2.0 ** (mode.p_max - 1)
                w = rng.uniform(-half, half, self.weight_shape)
            else:
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in), self.weight_shape)
            self.latents["weight"] = Tensor(w, requires_grad=True, name="weight")
        for key, lat in self.latents.items():
            lat.name = f"{name}.{key}"
        self.bias = None
        if bias_features is not None:
            bound = 1.0 / math.sqrt(fan_in)
            self.bias = Tensor(rng.uniform(-bound, bound, bias_features), requires_grad=True, name=f"{name}.bias")

    def effective_weight(self) -> Tensor:
        """The (discrete, unless fp32) weight tensor the forward pass uses, graph-connected."""
        m = self.mode
        if m.kind == "fp32":
            w = self.latents["weight"]
        elif m.kind == "ternary":
            w = qz.ternary_quantize(self.latents["weight"], m.ternary_delta, m.ste)
            if m.ternary_scale:
                w = self._ternary_rescale(w)
        elif m.kind == "deepshift":
            w = qz.deepshift_quantize(self.latents["weight"], m.p_min, m.p_max, m.ste)
        elif m.kind == "s3_ternary":
            w = qz.s3_project_ternary(self.s3, m.ste)
        else:
            w = qz.s3_project_shift(self.s3, m.t, m.ste)
        return w

    def _ternary_rescale(self, wq: Tensor) -> Tensor:
        latent = self.latents["weight"].data
        nz = wq.data != 0
        alpha = float(np.abs(latent[nz]).mean()) if nz.any() else 1.0
        return ad.scale(wq, alpha)

    def effective_values(self) -> np.ndarray:
        return self.effective_weight().data.copy()

    def weight_latents(self) -> list[Tensor]:
        return list(self.latents.values())

    def sparse_latent(self) -> Tensor | None:
        return self.s3.w_sparse if self.s3 is not None else None

    def histogram_latent(self) -> np.ndarray:
        """Pre-quantizer values: the weight latent, or the sign latent for S3 layers."""
        if self.s3 is not None:
            return self.s3.w_sign.data
        return self.latents["weight"].data

    def parameters(self) -> list[Tensor]:
        ps = self.weight_latents()
        if self.bias is not None:
            ps.append(self.bias)
        return ps

    def _weight_for_forward(self) -> Tensor:
        w = self.effective_weight()
        w.retain_grad = True
        self.last_weight = w
        return w


class QuantLinear(QuantLayer):
    """y = x @ W (+ b) with W stored as [in_features, out_features]."""

    def __init__(self, name, in_features, out_features, mode=FP32, rng=None, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(name, (in_features, out_features), in_features, mode, rng,
                         out_features if bias else None)
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self._weight_for_forward())
        return ad.add_bias(y, self.bias) if self.bias is not None else y


class QuantConv2d(QuantLayer):
    def __init__(self, name, in_ch, out_ch, kernel, stride=1, padding=0, mode=FP32, rng=None, bias=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(name, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, mode, rng,
                         out_ch if bias else None)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self._weight_for_forward(), self.stride, self.padding)
        return ad.add_bias(y, self.bias) if self.bias is not None else y


class BatchNorm2d:
    """Full-precision batch norm; never quantized."""

    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return ad.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training, self.momentum, self.eps)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def fold(self) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode affine map as (scale, shift) per channel."""
        scale = self.gamma.data.astype(np.float64) / np.sqrt(self.running_var.astype(np.float64) + self.eps)
        shift = self.beta.data.astype(np.float64) - self.running_mean.astype(np.float64) * scale
        return scale, shift
