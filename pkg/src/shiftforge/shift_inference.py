"""Multiplication-free deployment: 3-bit packed shift weights and a fixed-point forward pass.

Code table (3 bits per weight, written MSB first, codes concatenated and
zero-padded to a whole byte):

    ======  ======    ======  ======
    code    weight    code    weight
    ======  ======    ======  ======
    000     0         001     -1
    100     +1        010     -2
    101     +2        011     -4
    110     +4        111     invalid
    ======  ======    ======  ======

Zero is the all-zero code, so a zero test is one compare. A packed layer is
evaluated with :func:`shift_matmul`: each nonzero weight contributes
``+-(x << p)`` to an int64 accumulator, so the inner loop has no multiply.

``.s3w`` file layout (little endian)::

    header   b"S3W1" | u16 version | u8 t | u32 record count
    record   u8 kind | u16 name length | name (utf-8) | u8 ndim | u32 dims[ndim]
             | u32 payload length | payload
    trailer  u32 CRC-32 of every preceding byte

Record kinds: 0 = packed codes (``ceil(3 n / 8)`` bytes), 1 = float32
little-endian values, 2 = JSON metadata (``ndim = 0``). ``t`` is the largest
shift amount any packed record may use.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .autodiff import conv_output_size
from .models import PROGRAMS, Model, ModelSpec, layer_plan

MAGIC = b"S3W1"
VERSION = 1
MAX_SHIFT = 2
DEFAULT_FRAC_BITS = 16
KIND_PACKED, KIND_FLOAT, KIND_META = 0, 1, 2
INT32_LIMIT = 2**31

_HEADER = struct.Struct("<4sHBI")


class PackError(ValueError):
    """A value outside the shift codomain reached the deployment gate."""


class FormatError(ValueError):
    """Malformed or corrupted ``.s3w`` data."""


# ---------------------------------------------------------------- codes


def encode(values) -> np.ndarray:
    """Weights in {0, +-1, +-2, +-4} -> uint8 codes, same shape."""
    w = np.asarray(values, dtype=np.float64)
    mag = np.abs(w)
    p = np.zeros(w.shape, dtype=np.int64)
    nz = mag != 0  # NaN counts as nonzero and then fails the power-of-two test
    with np.errstate(invalid="ignore"):
        p[nz] = np.nan_to_num(np.round(np.log2(mag[nz])), nan=-1, posinf=-1).astype(np.int64)
    legal = (~nz) | ((p >= 0) & (p <= MAX_SHIFT) & (np.exp2(p) == mag))
    if not legal.all():
        idx = tuple(int(i) for i in np.argwhere(~legal)[0])
        raise PackError(f"value {w[idx]!r} at index {idx} is not in {{0, +-1, +-2, +-4}}")
    codes = np.where(w > 0, 4 + p, np.where(w < 0, 1 + p, 0))
    return codes.astype(np.uint8)


def decode(codes) -> np.ndarray:
    c = np.asarray(codes, dtype=np.int64)
    if ((c < 0) | (c > 6)).any():
        raise FormatError("code 0b111 (or out of range) in packed data")
    p = np.where(c >= 4, c - 4, c - 1)
    mag = np.where(c == 0, 0.0, np.exp2(np.maximum(p, 0)))
    return np.where((c >= 1) & (c <= 3), -mag, mag).astype(np.float32)


def code_shift(codes: np.ndarray) -> np.ndarray:
    c = codes.astype(np.int64)
    return np.where(c == 0, 0, np.where(c >= 4, c - 4, c - 1))


def pack_codes(codes: np.ndarray) -> bytes:
    bits = np.unpackbits(codes.reshape(-1, 1).astype(np.uint8), axis=1)[:, 5:]
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_codes(payload: bytes, n: int) -> np.ndarray:
    need = math.ceil(3 * n / 8)
    if len(payload) != need:
        raise FormatError(f"packed payload holds {len(payload)} bytes, expected {need} for {n} weights")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[: 3 * n].reshape(n, 3)
    return (bits[:, 0] * 4 + bits[:, 1] * 2 + bits[:, 2]).astype(np.uint8)


@dataclass(frozen=True)
class PackedShiftTensor:
    shape: tuple
    payload: bytes
    t: int = MAX_SHIFT

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def codes(self) -> np.ndarray:
        codes = unpack_codes(self.payload, self.size)
        if (codes == 7).any():
            raise FormatError("code 0b111 in packed data")
        if (code_shift(codes) > self.t).any():
            raise FormatError(f"packed data uses a shift larger than t={self.t}")
        return codes.reshape(self.shape)

    def decode(self) -> np.ndarray:
        return decode(self.codes())

    def max_shift(self) -> int:
        c = self.codes()
        return int(code_shift(c[c != 0]).max()) if (c != 0).any() else 0


def pack(weights, t: int = MAX_SHIFT) -> PackedShiftTensor:
    """Encode weights in {0, +-1, +-2, +-4}; shifts above ``t`` are rejected."""
    if not 0 <= t <= MAX_SHIFT:
        raise PackError(f"t={t} does not fit the 3-bit format (0 <= t <= {MAX_SHIFT})")
    w = np.asarray(weights)
    codes = encode(w)
    over = (codes != 0) & (code_shift(codes) > t)
    if over.any():
        idx = tuple(int(i) for i in np.argwhere(over)[0])
        raise PackError(f"value {w[idx]!r} at index {idx} needs a shift larger than t={t}")
    return PackedShiftTensor(tuple(int(s) for s in w.shape), pack_codes(codes), t)


def unpack(packed: PackedShiftTensor) -> np.ndarray:
    return packed.decode()


# ---------------------------------------------------------------- fixed point


@dataclass(frozen=True)
class FixedPointActivation:
    """Integers ``values`` representing ``values / 2**frac_bits``."""

    values: np.ndarray
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.size and (int(v.max()) >= INT32_LIMIT or int(v.min()) < -INT32_LIMIT):
            raise OverflowError("fixed-point values exceed the int32 range")
        object.__setattr__(self, "values", v.astype(np.int32))

    @classmethod
    def from_float(cls, x, frac_bits: int = DEFAULT_FRAC_BITS) -> "FixedPointActivation":
        scaled = np.rint(np.asarray(x, dtype=np.float64) * 2.0**frac_bits)
        if scaled.size and np.abs(scaled).max() >= INT32_LIMIT:
            raise OverflowError(f"input does not fit int32 with frac_bits={frac_bits}")
        return cls(scaled.astype(np.int64), frac_bits)

    def to_float(self) -> np.ndarray:
        return self.values.astype(np.float64) / 2.0**self.frac_bits


def _csr(codes: np.ndarray):
    """Row-compressed nonzero weights of a [k, n] code matrix (zero weights are skipped)."""
    nz = codes != 0
    rowptr = np.concatenate([[0], np.cumsum(nz.sum(axis=1))]).astype(np.int64)
    ks, cols = np.nonzero(nz)
    c = codes[ks, cols].astype(np.int64)
    shifts = np.where(c >= 4, c - 4, c - 1).astype(np.int64)
    negs = c < 4
    return rowptr, cols.astype(np.int64), shifts, negs


def _shift_matmul_int(x: np.ndarray, codes: np.ndarray) -> np.ndarray:
    k, n = codes.shape
    if x.ndim != 2 or x.shape[1] != k:
        raise ValueError(f"shift_matmul shape mismatch: x {x.shape} vs w {codes.shape}")
    # every partial sum of output (i, j) is bounded by sum_k |x_ik| |w_kj|; this pre-check is
    # exact in float64 (integers below 2^53) and is not part of the shift-add kernel
    headroom = float((np.abs(x.astype(np.float64)) @ np.abs(decode(codes).astype(np.float64))).max(initial=0.0))
    if headroom >= INT32_LIMIT:
        raise OverflowError(f"accumulator bound {headroom:.0f} reaches 2^31; lower frac_bits")
    rowptr, cols, shifts, negs = _csr(codes)
    return _kernels.shift_accumulate(np.ascontiguousarray(x, dtype=np.int64), rowptr, cols, shifts, negs, n)


def shift_matmul(x: FixedPointActivation, w: PackedShiftTensor) -> FixedPointActivation:
    """``x @ decode(w)`` computed with shifts, negations and adds. Raises OverflowError instead of wrapping."""
    if len(w.shape) != 2:
        raise ValueError(f"packed weight must be 2-d [k, n], got shape {w.shape}")
    return FixedPointActivation(_shift_matmul_int(x.values, w.codes()), x.frac_bits)


# ---------------------------------------------------------------- packed models


@dataclass
class PackedLayer:
    name: str
    kind: str  # "linear" | "conv"
    weight: PackedShiftTensor | np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    @property
    def packed(self) -> bool:
        return isinstance(self.weight, PackedShiftTensor)

    @property
    def shape(self) -> tuple:
        return tuple(self.weight.shape)

    def float_weight(self) -> np.ndarray:
        return (self.weight.decode() if self.packed else self.weight).astype(np.float64)

    def matrix_codes(self) -> np.ndarray:
        """Codes laid out as the [k, n] right operand."""
        c = self.weight.codes()
        return c if self.kind == "linear" else c.reshape(c.shape[0], -1).T.copy()

    def matrix(self) -> np.ndarray:
        w = self.float_weight()
        return w if self.kind == "linear" else w.reshape(w.shape[0], -1).T


@dataclass
class PackedBatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def fold(self) -> tuple[np.ndarray, np.ndarray]:
        scale = self.gamma.astype(np.float64) / np.sqrt(self.running_var.astype(np.float64) + self.eps)
        return scale, self.beta.astype(np.float64) - self.running_mean.astype(np.float64) * scale


@dataclass
class PackedModel:
    architecture: str
    layers: dict
    bns: dict = field(default_factory=dict)
    num_classes: int = 10
    program: object = None

    def __post_init__(self):
        if self.program is None:
            if self.architecture not in PROGRAMS:
                raise ValueError(f"no program for architecture {self.architecture!r}")
            self.program = PROGRAMS[self.architecture]

    @property
    def t(self) -> int:
        return max((l.weight.t for l in self.layers.values() if l.packed), default=0)

    def input_shape(self) -> tuple:
        return ModelSpec(self.architecture, num_classes=self.num_classes).input_shape

    def save(self, path) -> int:
        records = [(KIND_META, "__meta__", json.dumps(self._meta(), sort_keys=True).encode())]
        for name, layer in self.layers.items():
            records.append((KIND_PACKED if layer.packed else KIND_FLOAT, name, layer.weight))
            if layer.bias is not None:
                records.append((KIND_FLOAT, f"{name}.bias", layer.bias))
        for name, bn in self.bns.items():
            for key in ("gamma", "beta", "running_mean", "running_var"):
                records.append((KIND_FLOAT, f"{name}.{key}", getattr(bn, key)))
        blob = write_s3w(records, self.t)
        Path(path).write_bytes(blob)
        return len(blob)

    def _meta(self) -> dict:
        return {
            "architecture": self.architecture,
            "num_classes": self.num_classes,
            "bn_eps": {name: bn.eps for name, bn in self.bns.items()},
        }

    @classmethod
    def load(cls, path) -> "PackedModel":
        return cls.from_records(read_s3w(Path(path).read_bytes()))

    @classmethod
    def from_records(cls, records: dict) -> "PackedModel":
        if "__meta__" not in records:
            raise FormatError("missing __meta__ record")
        meta = records["__meta__"]
        arch, nc = meta.get("architecture"), int(meta.get("num_classes", 10))
        try:
            plan = layer_plan(ModelSpec(arch, num_classes=nc))
        except ValueError as exc:
            raise FormatError(str(exc)) from None
        layers, bns = {}, {}
        for kind, name, geo in plan:
            if kind == "bn":
                try:
                    parts = [np.asarray(records[f"{name}.{k}"], dtype=np.float32)
                             for k in ("gamma", "beta", "running_mean", "running_var")]
                except KeyError as exc:
                    raise FormatError(f"missing batch-norm record {exc.args[0]}") from None
                bns[name] = PackedBatchNorm(*parts, eps=float(meta.get("bn_eps", {}).get(name, 1e-5)))
                continue
            if name not in records:
                raise FormatError(f"missing weight record for layer {name!r}")
            w = records[name]
            expected = tuple(geo[:2]) if kind == "linear" else (geo[1], geo[0], geo[2], geo[2])
            if tuple(w.shape) != expected:
                raise FormatError(f"layer {name!r} has shape {tuple(w.shape)}, expected {expected}")
            stride, pad = (1, 0) if kind == "linear" else (geo[3], geo[4])
            layers[name] = PackedLayer(name, kind, w, records.get(f"{name}.bias"), stride, pad)
        return cls(arch, layers, bns, nc)


def export_model(model: Model, path=None) -> PackedModel:
    """Pack every quantized layer of a trained model; full-precision layers stay float32.

    A quantized layer whose values fall outside {0, +-1, +-2, +-4} (e.g. scaled
    ternary) raises :class:`PackError`.
    """
    layers = {}
    for kind, name, geo in layer_plan(model.spec):
        if kind == "bn":
            continue
        ql = model.layers[name]
        values = ql.effective_values()
        if ql.mode.quantized:
            try:
                w = pack(values, t=min(ql.mode.shift_bits, MAX_SHIFT))
            except PackError as exc:
                raise PackError(f"layer {name!r} ({ql.mode.kind}): {exc}") from None
        else:
            w = values.astype(np.float32)
        bias = None if ql.bias is None else ql.bias.data.astype(np.float32).copy()
        stride, pad = (1, 0) if kind == "linear" else (geo[3], geo[4])
        layers[name] = PackedLayer(name, kind, w, bias, stride, pad)
    bns = {
        name: PackedBatchNorm(bn.gamma.data.copy(), bn.beta.data.copy(), bn.running_mean.copy(),
                              bn.running_var.copy(), bn.eps)
        for name, bn in model.bns.items()
    }
    packed = PackedModel(model.spec.architecture, layers, bns, model.spec.num_classes)
    if path is not None:
        packed.save(path)
    return packed


# ---------------------------------------------------------------- file format


def write_s3w(records, t: int) -> bytes:
    """Serialize ``(kind, name, value)`` records. Values: PackedShiftTensor, array, or bytes (meta)."""
    out = bytearray(_HEADER.pack(MAGIC, VERSION, t, len(records)))
    for kind, name, value in records:
        raw = name.encode("utf-8")
        if kind == KIND_PACKED:
            shape, payload = value.shape, value.payload
        elif kind == KIND_FLOAT:
            arr = np.asarray(value, dtype="<f4")
            shape, payload = arr.shape, arr.tobytes()
        elif kind == KIND_META:
            shape, payload = (), bytes(value)
        else:
            raise ValueError(f"unknown record kind {kind}")
        out += struct.pack("<BH", kind, len(raw)) + raw
        out += struct.pack(f"<B{len(shape)}I", len(shape), *shape)
        out += struct.pack("<I", len(payload)) + payload
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("truncated .s3w data")
        b = self.blob[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def read_s3w(blob: bytes) -> dict:
    """Parse and validate an ``.s3w`` blob into ``name -> PackedShiftTensor | ndarray | dict``."""
    if len(blob) < _HEADER.size + 4:
        raise FormatError("file too short for an .s3w header")
    magic, version, t, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not an .s3w file")
    if version != VERSION:
        raise FormatError(f"unsupported .s3w version {version}")
    if t > MAX_SHIFT:
        raise FormatError(f"header t={t} exceeds the 3-bit format")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("CRC mismatch; file is corrupted")
    r = _Reader(blob[:-4])
    r.pos = _HEADER.size
    out = {}
    for _ in range(count):
        kind, nlen = r.unpack("<BH")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
        (plen,) = r.unpack("<I")
        payload = r.take(plen)
        if name in out:
            raise FormatError(f"duplicate record {name!r}")
        n = int(np.prod(shape, dtype=np.int64))
        if kind == KIND_PACKED:
            tensor = PackedShiftTensor(shape, payload, t)
            tensor.codes()  # validates length, code 7 and shift range
            out[name] = tensor
        elif kind == KIND_FLOAT:
            if plen != 4 * n:
                raise FormatError(f"float record {name!r} holds {plen} bytes, expected {4 * n}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        elif kind == KIND_META:
            try:
                out[name] = json.loads(payload.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"bad metadata record: {exc}") from None
        else:
            raise FormatError(f"unknown record kind {kind} for {name!r}")
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes after the last record")
    return out


# ---------------------------------------------------------------- forward passes


def _im2col(x: np.ndarray, layer: PackedLayer):
    n, c, h, w = x.shape
    _, _, kh, kw = layer.shape
    ho = conv_output_size(h, kh, layer.stride, layer.padding)
    wo = conv_output_size(w, kw, layer.stride, layer.padding)
    return _kernels.im2col(np.ascontiguousarray(x), kh, kw, layer.stride, layer.padding, ho, wo), (n, ho, wo)


def _to_nchw(y: np.ndarray, geom) -> np.ndarray:
    n, ho, wo = geom
    return y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)


def _op_norm(layer: PackedLayer) -> float:
    """Induced infinity norm of the layer's linear map (max absolute column sum of the [k, n] matrix)."""
    return float(np.abs(layer.matrix()).sum(axis=0).max(initial=0.0))


class _ReferenceBackend:
    """Float64 activations, same discrete weights, folded batch norm."""

    def __init__(self, model: PackedModel):
        self.m = model

    def has(self, name):
        return name in self.m.layers

    def conv(self, name, x):
        layer = self.m.layers[name]
        if layer.kind == "linear":
            y = x @ layer.matrix()
        else:
            cols, geom = _im2col(x, layer)
            y = _to_nchw(cols @ layer.matrix(), geom)
        return _add_bias(y, layer.bias)

    linear = conv

    def bn(self, name, x):
        scale, shift = self.m.bns[name].fold()
        return x * _chan(scale, x) + _chan(shift, x)

    relu = staticmethod(lambda x: np.maximum(x, 0.0))
    flatten = staticmethod(lambda x: x.reshape(x.shape[0], -1))
    add = staticmethod(lambda a, b: a + b)

    @staticmethod
    def maxpool(x, k=2):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5))

    @staticmethod
    def avgpool(x, k=2):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    @staticmethod
    def gap(x):
        return x.mean(axis=(2, 3))


def _chan(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1) if x.ndim == 4 else v.reshape(1, -1)


def _add_bias(y, bias):
    return y if bias is None else y + _chan(bias.astype(y.dtype), y)


@dataclass
class _Fx:
    """Fixed-point activation plus an infinity-norm bound on its distance from the reference."""

    q: np.ndarray  # int64, checked against int32
    err: float


class _FixedBackend:
    def __init__(self, model: PackedModel, frac_bits: int):
        self.m = model
        self.f = frac_bits
        self.lsb = 2.0**-frac_bits
        self.trace: list[tuple[str, float]] = []

    def _check(self, q: np.ndarray, where: str) -> np.ndarray:
        if q.size and (q.max() >= INT32_LIMIT or q.min() < -INT32_LIMIT):
            raise OverflowError(f"fixed-point overflow after {where}; lower frac_bits")
        return q

    def _requant(self, y: np.ndarray, where: str):
        """Float values -> fixed point, returning the rounding error actually incurred."""
        scaled = y * 2.0**self.f
        q = np.rint(scaled)
        if q.size and np.abs(q).max() >= INT32_LIMIT:
            raise OverflowError(f"fixed-point overflow after {where}; lower frac_bits")
        rounding = float(np.abs(q - scaled).max(initial=0.0)) * self.lsb
        return q.astype(np.int64), rounding

    def has(self, name):
        return name in self.m.layers

    def conv(self, name, x: _Fx) -> _Fx:
        layer = self.m.layers[name]
        if layer.kind == "linear":
            rows, geom = x.q, None
        else:
            rows, geom = _im2col(x.q, layer)
        err = x.err * _op_norm(layer)
        if layer.packed:
            acc = _shift_matmul_int(rows, layer.matrix_codes())
            if geom is not None:
                acc = _to_nchw(acc, geom)
            if layer.bias is not None:
                bq, rounding = self._requant(layer.bias.astype(np.float64), f"{name}.bias")
                acc = acc + _chan(bq, acc)
                err += rounding
            q = self._check(acc, name)
        else:
            # full-precision layer: multiplies are unavoidable, computed in float64 and re-quantized
            y = (rows.astype(np.float64) * self.lsb) @ layer.matrix()
            if geom is not None:
                y = _to_nchw(y, geom)
            q, rounding = self._requant(_add_bias(y, layer.bias), name)
            err += rounding + 1e-9 * float(np.abs(y).max(initial=0.0))
        self.trace.append((name, err))
        return _Fx(q, err)

    linear = conv

    def bn(self, name, x: _Fx) -> _Fx:
        scale, shift = self.m.bns[name].fold()
        y = x.q.astype(np.float64) * self.lsb * _chan(scale, x.q) + _chan(shift, x.q)
        q, rounding = self._requant(y, name)
        err = x.err * float(np.abs(scale).max(initial=0.0)) + rounding + 1e-12 * float(np.abs(y).max(initial=0.0))
        self.trace.append((name, err))
        return _Fx(q, err)

    @staticmethod
    def relu(x: _Fx) -> _Fx:
        return _Fx(np.maximum(x.q, 0), x.err)

    @staticmethod
    def flatten(x: _Fx) -> _Fx:
        return _Fx(x.q.reshape(x.q.shape[0], -1), x.err)

    @staticmethod
    def maxpool(x: _Fx, k=2) -> _Fx:
        n, c, h, w = x.q.shape
        return _Fx(x.q.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5)), x.err)

    def _mean_int(self, s: np.ndarray, count: int):
        """Round-to-nearest integer mean; an arithmetic shift when ``count`` is a power of two."""
        if count & (count - 1) == 0:
            sh = count.bit_length() - 1
            q = (s + (count >> 1)) >> sh if sh else s
        else:
            q = np.floor((s + count // 2) / count).astype(np.int64)
        rounding = float(np.abs(q * count - s).max(initial=0)) / count * self.lsb
        return q, rounding

    def avgpool(self, x: _Fx, k=2) -> _Fx:
        n, c, h, w = x.q.shape
        s = x.q.reshape(n, c, h // k, k, w // k, k).sum(axis=(3, 5))
        q, rounding = self._mean_int(s, k * k)
        return _Fx(q, x.err + rounding)

    def gap(self, x: _Fx) -> _Fx:
        n, c, h, w = x.q.shape
        q, rounding = self._mean_int(x.q.sum(axis=(2, 3)), h * w)
        return _Fx(q, x.err + rounding)

    def add(self, a: _Fx, b: _Fx) -> _Fx:
        return _Fx(self._check(a.q + b.q, "residual add"), a.err + b.err)


@dataclass
class ShiftResult:
    logits: np.ndarray  # float64, dequantized
    fixed: FixedPointActivation
    error_bound: float  # max |logits - reference| guaranteed by the tracked bound
    layer_bounds: list = field(default_factory=list)


def _check_input(model: PackedModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[1:]) != model.input_shape():
        raise ValueError(f"{model.architecture} expects inputs [N, {model.input_shape()}], got {x.shape}")
    return x


def reference_forward(model: PackedModel, x, batch_size: int = 256) -> np.ndarray:
    x = _check_input(model, x)
    outs = [model.program(_ReferenceBackend(model), x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, model.num_classes))


def shift_forward(model: PackedModel, x, frac_bits: int = DEFAULT_FRAC_BITS, batch_size: int = 256) -> ShiftResult:
    """Fixed-point forward; packed layers run through :func:`shift_matmul`'s shift-add kernel."""
    x = _check_input(model, x)
    logits, bounds, bound = [], [], 0.0
    for i in range(0, len(x), batch_size):
        be = _FixedBackend(model, frac_bits)
        q, rounding = be._requant(x[i : i + batch_size], "input quantization")
        out = model.program(be, _Fx(q, rounding))
        logits.append(out.q)
        bound = max(bound, out.err)
        if not bounds:
            bounds = be.trace
        else:
            bounds = [(n, max(e0, e1)) for (n, e0), (_, e1) in zip(bounds, be.trace)]
    q = np.concatenate(logits) if logits else np.zeros((0, model.num_classes), dtype=np.int64)
    fixed = FixedPointActivation(q, frac_bits)
    return ShiftResult(fixed.to_float(), fixed, bound, bounds)


# ---------------------------------------------------------------- op accounting


OP_KEYS = ("shifts", "adds", "sign_flips", "multiplies", "compares")


@dataclass
class OpCounts:
    shifts: int = 0
    adds: int = 0
    sign_flips: int = 0
    multiplies: int = 0
    compares: int = 0
    per_layer: dict = field(default_factory=dict)

    def tally(self, where: str, **ops) -> None:
        row = self.per_layer.setdefault(where, dict.fromkeys(OP_KEYS, 0))
        for k, v in ops.items():
            row[k] += int(v)
            setattr(self, k, getattr(self, k) + int(v))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in OP_KEYS}


def layer_ops(layer: PackedLayer, rows: int) -> dict:
    """Static tally for ``rows`` input rows through one layer, as executed by the kernels.

    Packed layers skip zero weights: one shift per nonzero weight and row, one
    negation per negative weight, and ``nnz_j - 1`` accumulator adds per
    output column (plus one per bias). Full-precision layers are dense
    multiply-accumulate.
    """
    if layer.packed:
        w = layer.matrix_codes()
        nnz_col = (w != 0).sum(axis=0)
        neg = ((w >= 1) & (w <= 3)).sum()
        adds = int(np.maximum(nnz_col - 1, 0).sum())
        if layer.bias is not None:
            adds += w.shape[1]
        return {"shifts": rows * int(nnz_col.sum()), "sign_flips": rows * int(neg), "adds": rows * adds,
                "multiplies": 0}
    k, n = layer.matrix().shape
    adds = (k - 1) * n + (n if layer.bias is not None else 0)
    return {"multiplies": rows * k * n, "adds": rows * adds}


class _CountBackend:
    """Runs a program on shapes only."""

    def __init__(self, model: PackedModel, counts: OpCounts):
        self.m = model
        self.c = counts

    def has(self, name):
        return name in self.m.layers

    def conv(self, name, shape):
        layer = self.m.layers[name]
        if layer.kind == "linear":
            rows, out = shape[0], (shape[0], layer.shape[1])
        else:
            n, _, h, w = shape
            o, _, kh, kw = layer.shape
            ho = conv_output_size(h, kh, layer.stride, layer.padding)
            wo = conv_output_size(w, kw, layer.stride, layer.padding)
            rows, out = n * ho * wo, (n, o, ho, wo)
        self.c.tally(name, **layer_ops(layer, rows))
        return out

    linear = conv

    def bn(self, name, shape):
        size = int(np.prod(shape))
        self.c.tally(name, multiplies=size, adds=size)
        return shape

    def relu(self, shape):
        self.c.tally("relu", compares=int(np.prod(shape)))
        return shape

    @staticmethod
    def flatten(shape):
        return (shape[0], int(np.prod(shape[1:])))

    def maxpool(self, shape, k=2):
        n, c, h, w = shape
        out = (n, c, h // k, w // k)
        self.c.tally("pool", compares=int(np.prod(out)) * (k * k - 1))
        return out

    def avgpool(self, shape, k=2):
        n, c, h, w = shape
        out = (n, c, h // k, w // k)
        self._mean(out, k * k)
        return out

    def gap(self, shape):
        n, c, h, w = shape
        self._mean((n, c), h * w)
        return (n, c)

    def _mean(self, out, count):
        size = int(np.prod(out))
        # sum, rounding offset, then a shift (or a divide for non powers of two)
        power2 = count & (count - 1) == 0
        self.c.tally("pool", adds=size * count, shifts=size if power2 else 0, multiplies=0 if power2 else size)

    def add(self, a, b):
        self.c.tally("residual", adds=int(np.prod(a)))
        return a


def count_ops(model: PackedModel, input_shape=None) -> OpCounts:
    """Exact static op tallies for one forward pass; ``input_shape`` may omit the batch axis (batch 1)."""
    shape = tuple(input_shape) if input_shape is not None else model.input_shape()
    if len(shape) == len(model.input_shape()):
        shape = (1,) + shape
    counts = OpCounts()
    model.program(_CountBackend(model, counts), shape)
    return counts
