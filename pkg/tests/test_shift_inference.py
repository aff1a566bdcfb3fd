import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import int_matmul, s3_latents_for
from shiftforge import shift_inference as si
from shiftforge.layers import WeightMode
from shiftforge.models import ModelSpec, build_model
from shiftforge.shift_inference import (
    FixedPointActivation,
    FormatError,
    PackedLayer,
    PackedModel,
    PackError,
    count_ops,
    pack,
    shift_forward,
    shift_matmul,
    unpack,
)

LEGAL = np.array([0, 1, 2, 4, -1, -2, -4], np.float32)


def one_linear(weight, bias=None):
    """A packed model whose program is flatten -> one linear layer (MNIST-shaped input)."""
    layer = PackedLayer("fc", "linear", weight, bias)
    return PackedModel("mlp_mnist", {"fc": layer}, program=lambda b, x: b.linear("fc", b.flatten(x)))


def test_pack_example_codes():
    p = pack([0, 1, -4])
    np.testing.assert_array_equal(p.codes(), [0b000, 0b100, 0b011])
    # 000 100 011 -> 0b00010001 1(0000000)
    assert p.payload == bytes([0b00010001, 0b10000000])


def test_full_code_table():
    np.testing.assert_array_equal(si.encode(LEGAL), [0b000, 0b100, 0b101, 0b110, 0b001, 0b010, 0b011])
    np.testing.assert_array_equal(unpack(pack(LEGAL)), LEGAL)


@pytest.mark.parametrize("bad", [3.0, 8.0, 0.5, -3.0, np.nan])
def test_pack_rejects_out_of_codomain(bad):
    with pytest.raises(PackError, match=r"index \(2,\)"):
        pack([1.0, 0.0, bad])


def test_pack_respects_t():
    with pytest.raises(PackError, match="t=1"):
        pack([0, 4], t=1)
    assert pack([0, 2, -2], t=1).max_shift() == 1
    with pytest.raises(PackError):
        pack([1], t=3)


@given(hnp.arrays(np.float32, hnp.array_shapes(max_dims=3, max_side=9), elements=st.sampled_from(LEGAL.tolist())))
def test_pack_roundtrip_and_size(w):
    p = pack(w)
    assert len(p.payload) == math.ceil(3 * w.size / 8)
    np.testing.assert_array_equal(unpack(p), w)


def test_invalid_code_rejected():
    bad = si.PackedShiftTensor((1,), bytes([0b11100000]))
    with pytest.raises(FormatError):
        bad.codes()
    with pytest.raises(FormatError):
        si.PackedShiftTensor((3,), bytes([0])).codes()


def test_shift_matmul_examples():
    x = FixedPointActivation(np.array([[3]]), 0)
    assert shift_matmul(x, pack([[4.0]])).values.tolist() == [[12]]
    x = FixedPointActivation(np.array([[5, -7, 9]]), 0)
    assert not shift_matmul(x, pack(np.zeros((3, 2)))).values.any()
    with pytest.raises(ValueError):
        shift_matmul(x, pack(np.zeros(3)))
    with pytest.raises(ValueError):
        shift_matmul(x, pack(np.zeros((4, 2))))


def test_shift_matmul_random_8x8x8(rng):
    for _ in range(20):
        x = rng.integers(-1000, 1000, (8, 8))
        w = rng.choice(LEGAL, (8, 8))
        got = shift_matmul(FixedPointActivation(x, 0), pack(w)).values
        assert got.tolist() == int_matmul(x, w.astype(np.int64))


def test_shift_matmul_overflow_is_raised():
    x = FixedPointActivation(np.full((1, 4), 2**29), 0)
    with pytest.raises(OverflowError):
        shift_matmul(x, pack(np.full((4, 1), 4.0)))
    # the same magnitudes cancelling still trip the bound check: no silent wrap is ever attempted
    with pytest.raises(OverflowError):
        shift_matmul(x, pack(np.array([[4.0], [-4.0], [4.0], [-4.0]])))


def test_fixed_point_activation():
    a = FixedPointActivation.from_float([0.5, -1.25], 4)
    assert a.values.tolist() == [8, -20]
    np.testing.assert_array_equal(a.to_float(), [0.5, -1.25])
    with pytest.raises(OverflowError):
        FixedPointActivation(np.array([2**31]), 0)
    with pytest.raises(OverflowError):
        FixedPointActivation.from_float([1e6], 16)


def test_single_layer_integer_inputs_exact(rng):
    w = rng.choice(LEGAL, (784, 10))
    model = one_linear(pack(w))
    x = rng.integers(-3, 4, (6, 1, 28, 28)).astype(np.float64)
    res = shift_forward(model, x, frac_bits=0)
    np.testing.assert_array_equal(res.logits, x.reshape(6, -1) @ w)
    np.testing.assert_array_equal(res.logits, si.reference_forward(model, x))
    assert res.error_bound == 0.0


def test_zero_input_gives_bias_path(rng):
    bias = (rng.integers(-500, 500, 10) / 2**10).astype(np.float32)
    model = one_linear(pack(rng.choice(LEGAL, (784, 10))), bias)
    res = shift_forward(model, np.zeros((3, 1, 28, 28)))
    np.testing.assert_array_equal(res.logits, np.tile(bias, (3, 1)))


def test_missing_layer_and_bad_input():
    with pytest.raises(FormatError, match="fc2"):
        PackedModel.from_records({"__meta__": {"architecture": "mlp_mnist"}, "fc1": np.zeros((784, 256))})
    model = one_linear(pack(np.zeros((784, 10))))
    with pytest.raises(ValueError):
        shift_forward(model, np.zeros((2, 3, 32, 32)))


def test_count_ops_linear_examples(rng):
    k, n = 784, 10
    dense = count_ops(one_linear(pack(rng.choice(LEGAL[1:], (k, n)))), (1, 28, 28)).as_dict()
    assert dense["adds"] == (k - 1) * n
    assert dense["shifts"] == k * n
    assert dense["multiplies"] == 0
    w = rng.choice(LEGAL[1:], (k, n))
    mask = rng.random((k, n)) < 0.7
    w[mask] = 0
    sparse = count_ops(one_linear(pack(w)), (1, 28, 28)).as_dict()
    assert sparse["shifts"] == round((1 - mask.mean()) * k * n) == np.count_nonzero(w)
    assert sparse["sign_flips"] == np.count_nonzero(w < 0)
    assert sparse["adds"] <= (k - 1) * n
    batch4 = count_ops(one_linear(pack(w)), (4, 1, 28, 28)).as_dict()
    assert batch4["shifts"] == 4 * sparse["shifts"]


def test_count_ops_fp32_layer_multiplies(rng):
    fp = count_ops(one_linear(rng.normal(size=(784, 10)).astype(np.float32)))
    assert fp.multiplies == 784 * 10
    model = si.export_model(build_model(ModelSpec("cnn_mnist", WeightMode("s3_shift")), 0))
    ops = count_ops(model)
    assert ops.per_layer["conv1"]["multiplies"] > 0  # full-precision first layer
    for name, layer in model.layers.items():
        if layer.packed:
            assert ops.per_layer[name]["multiplies"] == 0
            assert ops.per_layer[name]["shifts"] > 0


def _s3_model(arch, seed=0):
    model = build_model(ModelSpec(arch, WeightMode("s3_shift")), seed)
    r = np.random.default_rng(seed)
    for layer in model.layers.values():
        if layer.s3 is not None:
            sparse, sign, shifts = s3_latents_for(r.choice(LEGAL, layer.weight_shape))
            layer.s3.w_sparse.data = sparse.astype(np.float32)
            layer.s3.w_sign.data = sign.astype(np.float32)
            for lat, v in zip(layer.s3.shift_latents, shifts):
                lat.data = v.astype(np.float32)
    # calibrate running statistics on one batch so activations stay normalized
    for bn in model.bns.values():
        bn.momentum = 1.0
    model.forward(r.normal(size=(16,) + model.spec.input_shape).astype(np.float32), training=True)
    return model


@pytest.mark.parametrize("arch", ["mlp_mnist", "cnn_mnist", "resnet20_cifar"])
def test_export_save_load_and_forward(arch, tmp_path, rng):
    model = _s3_model(arch)
    packed = si.export_model(model, tmp_path / "m.s3w")
    back = PackedModel.load(tmp_path / "m.s3w")
    assert back.t == 2 and set(back.layers) == set(model.layers)
    for name, layer in model.layers.items():
        np.testing.assert_array_equal(back.layers[name].float_weight(), layer.effective_values())
        assert back.layers[name].packed == (layer.s3 is not None)
    shape = (4,) + model.spec.input_shape
    x = rng.normal(size=shape).astype(np.float32)
    ref = si.reference_forward(back, x)
    np.testing.assert_allclose(ref, model(x).data, rtol=1e-4, atol=1e-3)
    res = shift_forward(back, x, frac_bits=12)
    assert np.abs(res.logits - ref).max() <= res.error_bound
    assert [n for n, _ in res.layer_bounds][0] == next(iter(model.layers))
    assert packed.save(tmp_path / "again.s3w") == (tmp_path / "m.s3w").stat().st_size


def test_export_rejects_scaled_ternary():
    model = build_model(ModelSpec("mlp_mnist", WeightMode("ternary", ternary_scale=True)), 0)
    with pytest.raises(PackError, match="fc2"):
        si.export_model(model)


@pytest.fixture
def blob(tmp_path):
    si.export_model(_s3_model("mlp_mnist"), tmp_path / "m.s3w")
    return (tmp_path / "m.s3w").read_bytes()


def _recrc(b: bytes) -> bytes:
    return b[:-4] + struct.pack("<I", zlib.crc32(b[:-4]))


def test_header_rejections(blob):
    si.read_s3w(blob)
    with pytest.raises(FormatError, match="magic"):
        si.read_s3w(b"S3W0" + blob[4:])
    with pytest.raises(FormatError, match="version"):
        si.read_s3w(_recrc(blob[:4] + struct.pack("<H", 2) + blob[6:]))
    with pytest.raises(FormatError, match="t="):
        si.read_s3w(_recrc(blob[:6] + bytes([5]) + blob[7:]))
    with pytest.raises(FormatError, match="CRC"):
        si.read_s3w(blob[:20] + bytes([blob[20] ^ 1]) + blob[21:])
    with pytest.raises(FormatError):
        si.read_s3w(blob[:8])
    with pytest.raises(FormatError, match="truncated"):
        si.read_s3w(_recrc(blob[:7] + struct.pack("<I", 99) + blob[11:]))
    with pytest.raises(FormatError, match="trailing"):
        si.read_s3w(_recrc(blob[:-4] + b"\0\0\0\0" + blob[-4:]))
