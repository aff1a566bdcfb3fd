import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, conv2d_loops, rel_err
from shiftforge import autodiff as ad
from shiftforge.autodiff import GraphError, ShapeError, Tensor


def gradcheck(fn, *arrays, h=1e-3, seed=0):
    """Relative error between backward and central differences of sum(fn(*x) * R), one entry per input."""
    r_rng = np.random.default_rng(seed)
    probe = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*probe)
    weights = r_rng.normal(size=out.shape)
    loss = ad.sum(ad.mul(out, Tensor(weights)))
    ad.backward(loss)
    errs = []
    for i, a in enumerate(arrays):
        def f(xi, i=i):
            args = [Tensor(x) for x in arrays]
            args[i] = Tensor(xi)
            return float(np.sum(fn(*args).data.astype(np.float64) * weights))

        errs.append(rel_err(probe[i].grad, central_difference(f, np.asarray(a, dtype=np.float32), h)))
    return max(errs)


def away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(-2, 2, shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * (gap + 0.1), x).astype(np.float32)


# ---------------------------------------------------------------- examples


def test_matmul_identity_and_scalar():
    out = ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])
    np.testing.assert_array_equal(ad.matmul(Tensor([[2]]), Tensor([[0.5]])).data, [[1.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_ones_kernel():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


def test_conv_dirac_is_identity(rng):
    x = rng.normal(size=(2, 3, 5, 6)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(w), 1, 1).data, x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle_exactly(rng, stride, padding):
    # small integers: every partial sum is exact in float32, so agreement must be bitwise
    x = rng.integers(-3, 4, (2, 3, 7, 7)).astype(np.float32)
    w = rng.integers(-2, 3, (4, 3, 3, 3)).astype(np.float32)
    if (7 + 2 * padding - 3) % stride:
        pytest.skip("geometry not exact")
    got = ad.conv2d(Tensor(x), Tensor(w), stride, padding).data
    np.testing.assert_array_equal(got, conv2d_loops(x, w, stride, padding))


def test_conv_non_exact_output_size_is_error():
    with pytest.raises(ValueError, match="not integral"):
        ad.conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=0)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_relu_example():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_cross_entropy_uniform_is_ln10():
    loss = ad.cross_entropy(Tensor(np.zeros((4, 10))), np.arange(4))
    assert loss.item() == pytest.approx(math.log(10), abs=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.zeros((2, 10))), [0, 10])
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.zeros((2, 10))), [-1, 0])


def test_batchnorm_training_normalizes(rng):
    x = Tensor(rng.normal(3.0, 2.5, (16, 4, 5, 5)))
    rm, rv = np.zeros(4, np.float32), np.ones(4, np.float32)
    out = ad.batchnorm2d(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-3)
    assert (rm != 0).all() and (rv != 1).all()


def test_batchnorm_needs_batch_two():
    with pytest.raises(ValueError, match="batch"):
        ad.batchnorm2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       np.zeros(2, np.float32), np.ones(2, np.float32), training=True)


def test_batchnorm_eval_uses_running_stats():
    x = Tensor(np.full((2, 1, 1, 1), 5.0))
    out = ad.batchnorm2d(x, Tensor([2.0]), Tensor([1.0]), np.array([1.0], np.float32),
                         np.array([4.0], np.float32), training=False, eps=0.0)
    np.testing.assert_allclose(out.data, 2.0 * (5 - 1) / 2 + 1)


def test_maxpool_and_avgpool_values():
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(ad.maxpool2d(x, 2).data[0, 0], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(ad.avgpool2d(x, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    np.testing.assert_array_equal(ad.global_avgpool(x).data, [[7.5]])


def test_maxpool_ties_route_gradient_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ad.backward(ad.sum(ad.maxpool2d(x, 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_pool_generic_kernel_size():
    x = Tensor(np.arange(36, dtype=np.float32).reshape(1, 1, 6, 6), requires_grad=True)
    out = ad.maxpool2d(x, 3)
    np.testing.assert_array_equal(out.data[0, 0], [[14, 17], [32, 35]])
    ad.backward(ad.sum(out))
    assert x.grad.sum() == 4


# ---------------------------------------------------------------- backward semantics


def test_backward_sum_gives_ones():
    w = Tensor(np.zeros((2, 3)), requires_grad=True)
    ad.backward(ad.sum(w))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_backward_sum_squares():
    w = Tensor([1.0, -2.0], requires_grad=True)
    ad.backward(ad.sum_squares(w))
    np.testing.assert_array_equal(w.grad, [2.0, -4.0])


def test_double_backward_is_error():
    w = Tensor([1.0], requires_grad=True)
    loss = ad.sum(w * 2.0)
    ad.backward(loss)
    with pytest.raises(GraphError):
        ad.backward(loss)


def test_non_scalar_loss_is_error():
    with pytest.raises(GraphError):
        ad.backward(Tensor([1.0, 2.0], requires_grad=True) * 1.0)


def test_loss_without_grad_is_error():
    with pytest.raises(GraphError):
        ad.backward(ad.sum(Tensor([1.0])))


def test_gradients_accumulate_over_shared_inputs():
    w = Tensor([3.0], requires_grad=True)
    ad.backward(ad.sum(ad.add(w * 2.0, w * 5.0)))
    np.testing.assert_array_equal(w.grad, [7.0])


def test_nonfinite_forward_is_error():
    with pytest.raises(FloatingPointError):
        ad.exp2(Tensor([200.0]))
    with pytest.raises(FloatingPointError):
        Tensor([1.0]) * float("nan")


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones((1, 3))))


def test_compute_dtype_context_restores():
    with ad.compute_dtype(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(a, b):
    rng = np.random.default_rng(0)
    xv = rng.uniform(-2, 2, (3, 4)).astype(np.float32)

    def grad_of(fa, fb):
        x = Tensor(xv, requires_grad=True)
        f = ad.sum(ad.relu(x))
        g = ad.sum_squares(x)
        ad.backward(ad.add(ad.scale(f, fa), ad.scale(g, fb)))
        return x.grad

    np.testing.assert_allclose(grad_of(a, b), a * grad_of(1, 0) + b * grad_of(0, 1), rtol=1e-5, atol=1e-5)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = ad.conv2d(Tensor(x), Tensor(w), 1, 1).data
    b = ad.conv2d(Tensor(x), Tensor(w), 1, 1).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- finite differences (float32, h = 1e-3)

PER_OP_TOL = 1e-3


def _rm_rv(c):
    return np.zeros(c, np.float32), np.ones(c, np.float32)


OP_CASES = {
    "matmul": (lambda a, b: ad.matmul(a, b), [(4, 3), (3, 2)]),
    "add": (ad.add, [(3, 4), (3, 4)]),
    "mul": (ad.mul, [(3, 4), (3, 4)]),
    "scale": (lambda a: ad.scale(a, -1.5), [(5,)]),
    "add_scalar": (lambda a: ad.add_scalar(a, 0.7), [(5,)]),
    "exp2": (ad.exp2, [(6,)]),
    "sum_squares": (lambda a: ad.reshape(ad.sum_squares(a), (1,)), [(3, 3)]),
    "mean": (lambda a: ad.reshape(ad.mean(a), (1,)), [(3, 3)]),
    "add_bias": (ad.add_bias, [(4, 3), (3,)]),
    "add_bias_nchw": (ad.add_bias, [(2, 3, 2, 2), (3,)]),
    "flatten": (ad.flatten, [(2, 3, 2, 2)]),
    "conv2d": (lambda x, w: ad.conv2d(x, w, 1, 1), [(2, 2, 5, 5), (3, 2, 3, 3)]),
    "conv2d_stride": (lambda x, w: ad.conv2d(x, w, 2, 1), [(1, 2, 5, 5), (2, 2, 3, 3)]),
    "avgpool2d": (lambda x: ad.avgpool2d(x, 2), [(2, 2, 4, 4)]),
    "global_avgpool": (ad.global_avgpool, [(2, 3, 3, 3)]),
    "channel_pad": (lambda x: ad.channel_pad(x, 1, 2), [(2, 2, 2, 2)]),
    "batchnorm_train": (lambda x, g, b: ad.batchnorm2d(x, g, b, *_rm_rv(3), training=True), [(4, 3, 3, 3), (3,), (3,)]),
    "batchnorm_2d": (lambda x, g, b: ad.batchnorm2d(x, g, b, *_rm_rv(3), training=True), [(6, 3), (3,), (3,)]),
    "batchnorm_eval": (lambda x, g, b: ad.batchnorm2d(x, g, b, *_rm_rv(3), training=False), [(2, 3, 2, 2), (3,), (3,)]),
    "cross_entropy": (lambda z: ad.reshape(ad.cross_entropy(z, [0, 3, 1, 2]), (1,)), [(4, 5)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.uniform(-2, 2, s).astype(np.float32) for s in shapes]
    assert gradcheck(fn, *arrays) < PER_OP_TOL


def test_relu_gradient_away_from_kink(rng):
    assert gradcheck(ad.relu, away_from_zero(rng, (4, 5))) < PER_OP_TOL


def test_maxpool_gradient_with_distinct_values(rng):
    # values on a coarse grid so no perturbation of 1e-3 changes the argmax
    x = rng.permutation(64).reshape(1, 1, 8, 8).astype(np.float32) * 0.05 - 1.6
    assert gradcheck(lambda t: ad.maxpool2d(t, 2), x) < PER_OP_TOL
    assert gradcheck(lambda t: ad.maxpool2d(t, 4), x) < PER_OP_TOL


def test_straight_through_gradient_is_masked_identity():
    x = Tensor([0.5, 1.5, -0.2], requires_grad=True)
    out = ad.straight_through(x, np.array([1.0, 1.0, 0.0]), np.abs(x.data) <= 1.0)
    ad.backward(ad.sum(ad.scale(out, 2.0)))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 2.0])
