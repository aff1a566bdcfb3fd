"""Weight parameterizations: staircase quantizers and the sign-sparse-shift decomposition.

All discrete outputs are produced through :func:`autodiff.straight_through`, so
the backward pass is a (clipped) identity with respect to the latent.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_CLIP = 1.0
TERNARY_DELTA_FACTOR = 0.7


@dataclass(frozen=True)
class SteConfig:
    clip_range: float = DEFAULT_CLIP

    def __post_init__(self):
        if not self.clip_range > 0:
            raise ValueError(f"clip_range must be positive, got {self.clip_range}")

    def mask(self, x: np.ndarray) -> np.ndarray:
        return np.abs(x) <= self.clip_range


@dataclass(frozen=True)
class QuantSpec:
    """Staircase quantizer: ``values[i]`` on ``[thresholds[i-1], thresholds[i])``."""

    thresholds: tuple
    values: tuple

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        if len(self.values) != len(self.thresholds) + 1:
            raise ValueError("need exactly one more value than thresholds")
        if t.size and not np.all(np.diff(t) > 0):
            raise ValueError("thresholds must be strictly ascending")
        if not np.all(np.isfinite(t)):
            raise ValueError("thresholds must be finite")

    @classmethod
    def ternary(cls, delta: float) -> "QuantSpec":
        return cls((-float(delta), float(delta)), (-1.0, 0.0, 1.0))

    def apply(self, w: np.ndarray) -> np.ndarray:
        # side="right" puts w == t_i into the bucket above t_i (half-open intervals); float64
        # keeps thresholds that float32 cannot represent (e.g. 0.3) exact
        idx = np.searchsorted(np.asarray(self.thresholds, dtype=np.float64),
                              np.asarray(w, dtype=np.float64), side="right")
        return np.asarray(self.values, dtype=np.float32)[idx]


# ---------------------------------------------------------------- STE surrogate (gradient checking)

_SURROGATE: dict[int, np.ndarray] | None = None


@contextlib.contextmanager
def ste_surrogate(anchors: dict):
    """Replace Heaviside forwards by their STE linearization around ``anchors``.

    ``anchors`` maps latent Tensors to the point the linearization is taken at.
    Inside the context ``heaviside_ste(L)`` evaluates to
    ``H(a) + mask(a) * (L - a)``, whose exact derivative equals the STE
    gradient, so finite differences of the whole forward can be compared to
    :func:`autodiff.backward`.
    """
    global _SURROGATE
    prev = _SURROGATE
    _SURROGATE = {id(t): np.asarray(a, dtype=np.float64) for t, a in anchors.items()}
    try:
        yield
    finally:
        _SURROGATE = prev


def heaviside(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(np.float32)


def heaviside_ste(x: Tensor, cfg: SteConfig = SteConfig()) -> Tensor:
    if _SURROGATE is not None and id(x) in _SURROGATE:
        a = _SURROGATE[id(x)]
        mask = cfg.mask(a)
        return ad.straight_through(x, heaviside(a) + mask * (x.data - a), mask)
    return ad.straight_through(x, heaviside(x.data), cfg.mask(x.data))


def staircase_quantize(w: Tensor, spec: QuantSpec, cfg: SteConfig = SteConfig()) -> Tensor:
    return ad.straight_through(w, spec.apply(w.data), cfg.mask(w.data))


def auto_delta(w: np.ndarray) -> float:
    return TERNARY_DELTA_FACTOR * float(np.mean(np.abs(w)))


def ternary_quantize(w: Tensor, delta: float | None = None, cfg: SteConfig = SteConfig()) -> Tensor:
    """Threshold ternarization; ``delta=None`` uses 0.7 * mean|w| of this tensor."""
    if delta is None:
        delta = auto_delta(w.data)
        if delta == 0.0:
            return ad.straight_through(w, np.zeros_like(w.data), cfg.mask(w.data))
    if not delta > 0:
        raise ValueError(f"ternary delta must be positive, got {delta}")
    return staircase_quantize(w, QuantSpec.ternary(delta), cfg)


def deepshift_values(w: np.ndarray, p_min: int, p_max: int) -> np.ndarray:
    mag = np.abs(w).astype(np.float64)
    with np.errstate(divide="ignore"):
        p = np.rint(np.log2(np.where(mag > 0, mag, 1.0)))
    p = np.clip(p, p_min, p_max)
    out = np.sign(w) * np.exp2(p)
    out[mag < 2.0**p_min / math.sqrt(2.0)] = 0.0
    return out.astype(np.float32)


def deepshift_quantize(w: Tensor, p_min: int = 0, p_max: int = 2, cfg: SteConfig = SteConfig()) -> Tensor:
    """Round to the nearest power of two in the log domain, with a dead zone below 2^p_min/sqrt(2)."""
    if p_min > p_max:
        raise ValueError("p_min must not exceed p_max")
    return ad.straight_through(w, deepshift_values(w.data, p_min, p_max), cfg.mask(w.data))


# ---------------------------------------------------------------- sign-sparse-shift


@dataclass
class S3Weight:
    w_sign: Tensor
    w_sparse: Tensor
    shift_latents: list = field(default_factory=list)

    def __post_init__(self):
        shapes = {self.w_sign.shape, self.w_sparse.shape} | {s.shape for s in self.shift_latents}
        if len(shapes) != 1:
            raise ValueError(f"S3 latents must share one shape, got {shapes}")

    @property
    def t(self) -> int:
        return len(self.shift_latents)

    def latents(self) -> list:
        return [self.w_sign, self.w_sparse, *self.shift_latents]


def s3_project_ternary(s3: S3Weight, cfg: SteConfig = SteConfig()) -> Tensor:
    """sparse-gate * (2 * sign-gate - 1), codomain {-1, 0, 1}."""
    sparse = heaviside_ste(s3.w_sparse, cfg)
    sign = ad.add_scalar(ad.scale(heaviside_ste(s3.w_sign, cfg), 2.0), -1.0)
    return ad.mul(sparse, sign)


def shift_exponent(latents, cfg: SteConfig = SteConfig()) -> Tensor:
    """S_0 = 0, S_j = H(w_j) * (S_{j-1} + 1)."""
    s = None
    for lat in latents:
        gate = heaviside_ste(lat, cfg)
        s = gate if s is None else ad.mul(gate, ad.add_scalar(s, 1.0))
    return s


def s3_project_shift(s3: S3Weight, t: int | None = None, cfg: SteConfig = SteConfig()) -> Tensor:
    """2^S_t * ternary projection; codomain {0} ∪ {±2^p : 0 <= p <= t}."""
    t = s3.t if t is None else t
    if t < 1:
        raise ValueError("shift depth t must be >= 1")
    if s3.t != t:
        raise ValueError(f"S3 weight has {s3.t} shift latents, expected {t}")
    return ad.mul(ad.exp2(shift_exponent(s3.shift_latents, cfg)), s3_project_ternary(s3, cfg))


def s3_codomain(t: int) -> set:
    return {0.0} | {s * 2.0**p for p in range(t + 1) for s in (1.0, -1.0)}


def init_s3(shape, rng: np.random.Generator, t: int = 0, dense_prior: bool = True) -> S3Weight:
    """Draw S3 latents; with ``dense_prior`` every sparsity latent starts strictly positive."""
    shape = tuple(shape)
    w_sign = rng.uniform(-1.0, 1.0, shape)
    w_sparse = rng.uniform(0.1, 1.0, shape) if dense_prior else rng.uniform(-1.0, 1.0, shape)
    shifts = [Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True, name=f"w_shift{j + 1}") for j in range(t)]
    return S3Weight(
        Tensor(w_sign, requires_grad=True, name="w_sign"),
        Tensor(w_sparse, requires_grad=True, name="w_sparse"),
        shifts,
    )
