import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jacseg import functional as F
from jacseg.functional import BatchNormState
from jacseg.tensor import SGD, GraphError, Tensor, no_grad, sgd_step

from fdcheck import numeric_grad, rel_error


def _projected(fn, inputs, rng):
    """Run ``fn`` on tensors and backprop a random linear projection of the output."""
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)
    F.sum(F.hadamard(out, Tensor(proj))).backward()

    def scalar():
        with no_grad():
            return float((fn(*inputs).data * proj).sum())

    return scalar


def _check_grads(fn, arrays, rng, tol, eps=1e-6):
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    scalar = _projected(fn, inputs, rng)
    for t in inputs:
        num = numeric_grad(scalar, t.data, eps)
        assert rel_error(t.grad, num) < tol


# ---------------------------------------------------------------- conv2d


def test_conv_sum_of_ones():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1, 7, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = F.conv2d(Tensor(x), Tensor(k), padding=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding,size", [(1, 0, 8), (1, 1, 8), (2, 1, 7), (3, 2, 9)])
def test_conv_output_extent(stride, padding, size):
    x = Tensor(np.zeros((1, 2, size, size)))
    k = Tensor(np.zeros((3, 2, 3, 3)))
    out = F.conv2d(x, k, stride=stride, padding=padding)
    expected = (size + 2 * padding - 3) // stride + 1
    assert out.shape == (1, 3, expected, expected)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = F.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * k[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_gradients_finite_difference():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 8, 8))
    k = rng.standard_normal((6, 4, 3, 3))
    b = rng.standard_normal(6)
    _check_grads(lambda a, w, c: F.conv2d(a, w, c, padding=1), [x, k, b], rng, 1e-5)


def test_conv_strided_gradients():
    rng = np.random.default_rng(3)
    arrays = [rng.standard_normal((1, 2, 7, 7)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]
    _check_grads(lambda a, w, c: F.conv2d(a, w, c, stride=2, padding=1), arrays, rng, 1e-5)


def test_conv_errors():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


# ---------------------------------------------------------------- batch norm


def test_batchnorm_fixed_point():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 3, 6, 6))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = F.batchnorm(Tensor(x), BatchNormState.create(3), training=True)
    np.testing.assert_allclose(out.data, x, atol=1e-3)


def test_batchnorm_zero_gamma_gives_beta():
    rng = np.random.default_rng(5)
    state = BatchNormState.create(2)
    state.gamma.data[:] = 0.0
    state.beta.data[:] = [0.5, -2.0]
    out = F.batchnorm(Tensor(rng.standard_normal((3, 2, 4, 4))), state, training=True)
    np.testing.assert_array_equal(out.data[:, 0], 0.5)
    np.testing.assert_array_equal(out.data[:, 1], -2.0)


def test_batchnorm_degenerate_single_value():
    out = F.batchnorm(Tensor(np.full((1, 2, 1, 1), 3.0)), BatchNormState.create(2), training=True)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_array_equal(out.data, 0.0)


def test_batchnorm_gradients():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 2, 4, 5))
    state = BatchNormState.create(2)
    state.gamma.data[:] = rng.uniform(0.5, 2.0, 2)
    state.beta.data[:] = rng.standard_normal(2)
    xt = Tensor(x, requires_grad=True)
    scalar = _projected(lambda a: F.batchnorm(a, state, training=True), [xt], rng)
    for t in (xt, state.gamma, state.beta):
        assert rel_error(t.grad, numeric_grad(scalar, t.data)) < 1e-4


def test_batchnorm_inference_gradients():
    rng = np.random.default_rng(7)
    state = BatchNormState.create(2)
    state.running_mean[:] = [0.3, -0.1]
    state.running_var[:] = [2.0, 0.5]
    xt = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    scalar = _projected(lambda a: F.batchnorm(a, state, training=False), [xt], rng)
    for t in (xt, state.gamma, state.beta):
        assert rel_error(t.grad, numeric_grad(scalar, t.data)) < 1e-6


def test_batchnorm_running_stats_only_in_training():
    rng = np.random.default_rng(8)
    state = BatchNormState.create(2)
    x = Tensor(rng.standard_normal((4, 2, 3, 3)) + 5.0)
    F.batchnorm(x, state, training=False)
    np.testing.assert_array_equal(state.running_mean, 0.0)
    np.testing.assert_array_equal(state.running_var, 1.0)
    F.batchnorm(x, state, training=True)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.data.mean(axis=(0, 2, 3)))


def test_batchnorm_channel_mismatch():
    with pytest.raises(ValueError):
        F.batchnorm(Tensor(np.zeros((1, 3, 2, 2))), BatchNormState.create(2), training=True)


# ---------------------------------------------------------------- pointwise


def test_pointwise_values():
    assert F.relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0.0, 2.0]
    assert F.sigmoid(Tensor(np.array(0.0))).item() == 0.5
    assert F.tanh(Tensor(np.array(0.0))).item() == 0.0


def test_relu_subgradient_at_zero():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    F.sum(F.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("op", [F.sigmoid, F.tanh, F.relu])
def test_unary_gradients(op):
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
    _check_grads(op, [x], rng, 1e-6)


@pytest.mark.parametrize("op", [F.add, F.sub, F.hadamard])
def test_binary_gradients(op):
    rng = np.random.default_rng(10)
    _check_grads(op, [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 2, 3, 3))], rng, 1e-6)


def test_binary_shape_mismatch():
    with pytest.raises(ValueError):
        F.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError):
        F.hadamard(Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_sigmoid_extreme_inputs_finite():
    y = F.sigmoid(Tensor(np.array([-800.0, 800.0])))
    assert y.data.tolist() == [0.0, 1.0]


# ---------------------------------------------------------------- pooling


def test_maxpool_basic():
    out = F.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
    assert out.item() == 4.0


def test_maxpool_ties_go_to_first_element():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    out = F.maxpool2d(x, 2, 2)
    np.testing.assert_array_equal(out.data, 1.0)
    F.sum(out).backward()
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (2, 1)])
def test_maxpool_gradients(window, stride):
    rng = np.random.default_rng(11)
    # a permutation has no ties, and gaps of 1e-2 dwarf the 1e-6 step
    x = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 1e-2
    _check_grads(lambda a: F.maxpool2d(a, window, stride), [x], rng, 1e-6)


def test_maxpool_window_too_large():
    with pytest.raises(ValueError):
        F.maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3)


# ---------------------------------------------------------------- upsampling


def test_upsample_identity_and_constant():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((1, 2, 3, 4))
    np.testing.assert_array_equal(F.upsample_bilinear(Tensor(x), 1).data, x)
    c = F.upsample_bilinear(Tensor(np.full((1, 1, 3, 5), 2.5)), 4)
    assert c.shape == (1, 1, 12, 20)
    np.testing.assert_allclose(c.data, 2.5, rtol=1e-15)


@pytest.mark.parametrize("factor", [2, 3, 8])
def test_upsample_gradients_and_transpose(factor):
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 1, 3, 4))
    _check_grads(lambda a: F.upsample_bilinear(a, factor), [x], rng, 1e-6)
    # linear map: <U x, g> == <x, U^T g>
    g = rng.standard_normal((2, 1, 3 * factor, 4 * factor))
    xt = Tensor(x, requires_grad=True)
    F.sum(F.hadamard(F.upsample_bilinear(xt, factor), Tensor(g))).backward()
    lhs = (F.upsample_bilinear(Tensor(x), factor).data * g).sum()
    assert np.isclose(lhs, (x * xt.grad).sum(), rtol=1e-12)


# ---------------------------------------------------------------- plumbing ops


def test_concat_slice_scale_channels_gradients():
    rng = np.random.default_rng(14)
    a = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal((2, 3, 3, 3))
    _check_grads(lambda p, q: F.slice_axis(F.concat([p, q], axis=1), 1, 1, 4), [a, b], rng, 1e-6)
    _check_grads(F.scale_channels, [a, rng.standard_normal(2)], rng, 1e-6)


# ---------------------------------------------------------------- graph + optimizer


def test_sum_gradient_is_one():
    p = Tensor(np.random.default_rng(15).standard_normal((3, 4)), requires_grad=True)
    F.sum(p).backward()
    np.testing.assert_array_equal(p.grad, 1.0)


def test_backward_requires_scalar():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        F.relu(p).backward()


def test_backward_twice_is_an_error():
    p = Tensor(np.ones(3), requires_grad=True)
    loss = F.sum(F.tanh(p))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_visits_ops_in_reverse_execution_order():
    seen = []
    x = Tensor(np.ones(2), requires_grad=True)
    nodes = []
    h = x
    for k in range(4):
        h = F.scale(h, 2.0)
        nodes.append(h)
    for k, node in enumerate(nodes):
        inner = node._backward
        node._backward = lambda g, inner=inner, k=k: (seen.append(k), inner(g))[1]
    F.sum(h).backward()
    assert seen == [3, 2, 1, 0]
    np.testing.assert_array_equal(x.grad, 16.0)


def test_shared_input_accumulates():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    F.sum(F.hadamard(x, x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_nonfinite_is_an_error():
    with pytest.raises(FloatingPointError):
        F.scale(Tensor(np.array([1e308])), 1e10)


def test_ops_on_zeros_are_finite():
    z = Tensor(np.zeros((1, 2, 4, 4)))
    k = Tensor(np.zeros((2, 2, 3, 3)))
    out = F.conv2d(z, k, Tensor(np.zeros(2)), padding=1)
    out = F.batchnorm(out, BatchNormState.create(2), training=True)
    out = F.upsample_bilinear(F.maxpool2d(F.sigmoid(F.tanh(F.relu(out))), 2), 2)
    assert np.all(np.isfinite(out.data))


def test_sgd_plain_step():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    SGD([p], lr=0.1, momentum=0.0).step()
    assert p.data[0] == pytest.approx(-0.1)


def test_sgd_momentum_accumulates():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.5)
    p.grad = np.array([1.0])
    opt.step()
    opt.step()
    # v1 = -0.1, v2 = 0.5 * -0.1 - 0.1
    assert p.data[0] == pytest.approx(-0.1 - 0.15)


def test_functional_sgd_step_matches_class():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([0.5, -1.0])
    v = sgd_step([p], lr=0.2, momentum=0.9)
    np.testing.assert_allclose(p.data, [0.9, 2.2])
    v = sgd_step([p], lr=0.2, momentum=0.9, velocity=v)
    np.testing.assert_allclose(p.data, [0.9 - 0.09 - 0.1, 2.2 + 0.18 + 0.2])


def test_two_layer_composite_gradient():
    rng = np.random.default_rng(16)
    x = Tensor(rng.standard_normal((2, 1, 8, 8)))
    k1 = Tensor(rng.standard_normal((3, 1, 3, 3)), requires_grad=True)
    k2 = Tensor(rng.standard_normal((1, 3, 3, 3)), requires_grad=True)
    bn = BatchNormState.create(3)

    def net():
        h = F.relu(F.batchnorm(F.conv2d(x, k1, padding=1), bn, training=True))
        h = F.maxpool2d(h, 2)
        return F.mean(F.sigmoid(F.upsample_bilinear(F.conv2d(h, k2, padding=1), 2)))

    net().backward()

    def scalar():
        with no_grad():
            return net().item()

    for t in (k1, k2, bn.gamma, bn.beta):
        assert rel_error(t.grad, numeric_grad(scalar, t.data)) < 1e-4


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(17)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        y = F.mean(F.sigmoid(F.conv2d(x, k, padding=1)))
        y.backward()
        return y.data.tobytes(), k.grad.tobytes()

    assert run() == run()


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    o=st.integers(1, 3),
    h=st.integers(3, 6),
    w=st.integers(3, 6),
    pad=st.integers(0, 1),
    seed=st.integers(0, 2**16),
)
def test_conv_gradient_property(n, c, o, h, w, pad, seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal((n, c, h, w)), rng.standard_normal((o, c, 3, 3)), rng.standard_normal(o)]
    _check_grads(lambda a, k, b: F.conv2d(a, k, b, padding=pad), arrays, rng, 1e-4)
