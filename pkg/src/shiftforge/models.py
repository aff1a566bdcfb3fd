"""Reference architectures (MLP / CNN for MNIST, ResNet-20 for CIFAR-10).

Each architecture is written once as a *program* over an abstract backend
(``conv``, ``linear``, ``bn``, ``relu``, ...). The autodiff backend here
trains it; :mod:`shiftforge.shift_inference` runs the same program with
fixed-point shift kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import GraphError, Tensor
from .layers import FP32, BatchNorm2d, QuantConv2d, QuantLayer, QuantLinear, WeightMode

ARCHITECTURES = ("mlp_mnist", "cnn_mnist", "resnet20_cifar")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "cnn_mnist"
    mode: WeightMode = field(default_factory=WeightMode)
    first_layer_fp32: bool = True
    last_layer_quantized: bool = True
    bias: bool = True
    num_classes: int = 10

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")

    @property
    def input_shape(self) -> tuple:
        return (3, 32, 32) if self.architecture == "resnet20_cifar" else (1, 28, 28)


# ---------------------------------------------------------------- programs


def mlp_program(b, x):
    x = b.flatten(x)
    x = b.relu(b.linear("fc1", x))
    return b.linear("fc2", x)


def cnn_program(b, x):
    x = b.maxpool(b.relu(b.bn("bn1", b.conv("conv1", x))), 2)
    x = b.maxpool(b.relu(b.bn("bn2", b.conv("conv2", x))), 2)
    # shift-valued classifier weights are unscaled; a full-precision norm sets the logit scale
    return b.bn("fc_bn", b.linear("fc", b.flatten(x)))


RESNET_STAGES = (16, 32, 64)
RESNET_BLOCKS = 3


def resnet20_program(b, x):
    x = b.relu(b.bn("bn1", b.conv("conv1", x)))
    for s, _ in enumerate(RESNET_STAGES):
        for k in range(RESNET_BLOCKS):
            p = f"layer{s + 1}.{k}"
            if b.has(f"{p}.down"):
                # spatial halving by pooling keeps every conv output size exact
                x = b.avgpool(x, 2)
            out = b.relu(b.bn(f"{p}.bn1", b.conv(f"{p}.conv1", x)))
            out = b.bn(f"{p}.bn2", b.conv(f"{p}.conv2", out))
            short = b.bn(f"{p}.down_bn", b.conv(f"{p}.down", x)) if b.has(f"{p}.down") else x
            x = b.relu(b.add(out, short))
    return b.linear("fc", b.gap(x))


PROGRAMS = {"mlp_mnist": mlp_program, "cnn_mnist": cnn_program, "resnet20_cifar": resnet20_program}


def layer_plan(spec: ModelSpec) -> list[tuple]:
    """Ordered (kind, name, geometry) entries; kind is 'linear', 'conv' or 'bn'."""
    c = spec.num_classes
    if spec.architecture == "mlp_mnist":
        return [("linear", "fc1", (784, 256)), ("linear", "fc2", (256, c))]
    if spec.architecture == "cnn_mnist":
        return [
            ("conv", "conv1", (1, 8, 3, 1, 1)),
            ("bn", "bn1", 8),
            ("conv", "conv2", (8, 16, 3, 1, 1)),
            ("bn", "bn2", 16),
            ("linear", "fc", (16 * 7 * 7, c)),
            ("bn", "fc_bn", c),
        ]
    plan = [("conv", "conv1", (3, 16, 3, 1, 1)), ("bn", "bn1", 16)]
    cin = 16
    for s, cout in enumerate(RESNET_STAGES):
        for k in range(RESNET_BLOCKS):
            p = f"layer{s + 1}.{k}"
            plan += [
                ("conv", f"{p}.conv1", (cin, cout, 3, 1, 1)),
                ("bn", f"{p}.bn1", cout),
                ("conv", f"{p}.conv2", (cout, cout, 3, 1, 1)),
                ("bn", f"{p}.bn2", cout),
            ]
            if cin != cout:
                plan += [("conv", f"{p}.down", (cin, cout, 1, 1, 0)), ("bn", f"{p}.down_bn", cout)]
            cin = cout
    plan.append(("linear", "fc", (64, c)))
    return plan


# ---------------------------------------------------------------- model


class Model:
    def __init__(self, spec: ModelSpec, layers: dict, bns: dict):
        self.spec = spec
        self.layers: dict[str, QuantLayer] = layers
        self.bns: dict[str, BatchNorm2d] = bns
        self.program = PROGRAMS[spec.architecture]

    def forward(self, x, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        expected = self.spec.input_shape
        if tuple(x.shape[1:]) != expected:
            raise ad.ShapeError(f"{self.spec.architecture} expects inputs of shape [N, {expected}], got {x.shape}")
        return self.program(_AutodiffBackend(self, training), x)

    __call__ = forward

    def quant_layers(self) -> list[QuantLayer]:
        return list(self.layers.values())

    def parameters(self) -> list[Tensor]:
        ps = []
        for layer in self.layers.values():
            ps += layer.parameters()
        for bn in self.bns.values():
            ps += bn.parameters()
        return ps

    def l2_latents(self, include_s3: bool = True) -> list[Tensor]:
        out = []
        for layer in self.layers.values():
            if layer.s3 is not None and not include_s3:
                continue
            out += layer.weight_latents()
        return out

    def sparse_latents(self) -> list[Tensor]:
        return [l.s3.w_sparse for l in self.layers.values() if l.s3 is not None]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def effective_weights(self) -> dict[str, np.ndarray]:
        return {name: layer.effective_values() for name, layer in self.layers.items()}

    def num_parameters(self) -> int:
        """Deployed parameter count: one per effective weight, plus biases and batch-norm affine."""
        n = 0
        for layer in self.layers.values():
            n += int(np.prod(layer.weight_shape))
            if layer.bias is not None:
                n += layer.bias.size
        for bn in self.bns.values():
            n += bn.gamma.size + bn.beta.size
        return n

    # state as flat name -> array, used by checkpoints
    def state_arrays(self) -> dict[str, np.ndarray]:
        st = {}
        for layer in self.layers.values():
            for p in layer.parameters():
                st[p.name] = p.data
        for bn in self.bns.values():
            st[bn.gamma.name] = bn.gamma.data
            st[bn.beta.name] = bn.beta.data
            st[f"{bn.name}.running_mean"] = bn.running_mean
            st[f"{bn.name}.running_var"] = bn.running_var
        return st

    def load_state_arrays(self, st: dict) -> None:
        own = self.state_arrays()
        missing = set(own) - set(st)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for layer in self.layers.values():
            for p in layer.parameters():
                p.data = np.array(st[p.name], dtype=np.float32)
        for bn in self.bns.values():
            bn.gamma.data = np.array(st[bn.gamma.name], dtype=np.float32)
            bn.beta.data = np.array(st[bn.beta.name], dtype=np.float32)
            bn.running_mean[...] = st[f"{bn.name}.running_mean"]
            bn.running_var[...] = st[f"{bn.name}.running_var"]


class _AutodiffBackend:
    def __init__(self, model: Model, training: bool):
        self.m = model
        self.training = training

    def has(self, name):
        return name in self.m.layers

    def conv(self, name, x):
        return self.m.layers[name].forward(x)

    linear = conv

    def bn(self, name, x):
        return self.m.bns[name].forward(x, self.training)

    relu = staticmethod(ad.relu)
    flatten = staticmethod(ad.flatten)
    maxpool = staticmethod(ad.maxpool2d)
    avgpool = staticmethod(ad.avgpool2d)
    gap = staticmethod(ad.global_avgpool)
    add = staticmethod(ad.add)


def build_model(spec: ModelSpec, rng: np.random.Generator | int | None = None) -> Model:
    """Instantiate ``spec``; all latents are drawn from ``rng`` in layer order."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    plan = layer_plan(spec)
    weighted = [e for e in plan if e[0] != "bn"]
    layers, bns = {}, {}
    for kind, name, geo in plan:
        if kind == "bn":
            bns[name] = BatchNorm2d(name, geo)
            continue
        is_first = name == weighted[0][1]
        is_last = name == weighted[-1][1]
        mode = spec.mode
        if (is_first and spec.first_layer_fp32) or (is_last and not spec.last_layer_quantized):
            mode = replace(FP32)
        if kind == "linear":
            layers[name] = QuantLinear(name, geo[0], geo[1], mode, rng, bias=spec.bias)
        else:
            cin, cout, k, stride, pad = geo
            layers[name] = QuantConv2d(name, cin, cout, k, stride, pad, mode, rng, bias=False)
    return Model(spec, layers, bns)


def grad_flow_report(model: Model) -> list[dict]:
    """Per-layer gradient norm w.r.t. the effective weight, and the exactly-zero fraction.

    Must be called after :func:`autodiff.backward` on a loss from ``model``.
    """
    rows = []
    for name, layer in model.layers.items():
        w = layer.last_weight
        if w is None or w.grad is None:
            raise GraphError(f"no gradient recorded for layer {name}; run forward and backward first")
        g = w.grad
        rows.append({
            "layer": name,
            "grad_norm": float(np.linalg.norm(g)),
            "zero_grad_fraction": float(np.mean(g == 0)),
        })
    return rows
