import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from haszsl import autodiff as ad
from haszsl.autodiff import Tape, Tensor, grad_check
from haszsl.errors import ContractError, DimensionError

from conftest import directional_check, simplex_point, zero_sum_direction


def _w(rng, *shape):
    return rng.normal(size=shape)


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[1.0, -2.0, 3.0], [4.0, 5.0, 6.0]])
    assert np.array_equal(ad.matmul(np.eye(2), b).values, b)


def test_matmul_hand_arithmetic():
    out = ad.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    assert out.values.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_gradients(rng):
    a, b = _w(rng, 3, 4), _w(rng, 4, 2)
    w = _w(rng, 3, 2)
    assert grad_check(lambda x: ad.sum_(ad.matmul(x, b) * w), a) < 1e-6
    assert grad_check(lambda x: ad.sum_(ad.matmul(a, x) * w), b) < 1e-6


# -- conv1x1 --------------------------------------------------------------

def test_conv1x1_identity_kernel(rng):
    x = _w(rng, 3, 4, 4)
    assert np.allclose(ad.conv1x1(x, np.eye(3)).values, x, rtol=0, atol=1e-15)


def test_conv1x1_hand_arithmetic():
    out = ad.conv1x1(np.ones((2, 2, 2)), [[1.0], [1.0]])
    assert out.shape == (1, 2, 2)
    assert np.all(out.values == 2.0)


def test_conv1x1_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv1x1(np.ones((3, 2, 2)), np.ones((2, 1)))


@pytest.mark.parametrize("batched", [False, True])
def test_conv1x1_gradients(rng, batched):
    shape = (2, 3, 4, 4) if batched else (3, 4, 4)
    x, k = _w(rng, *shape), _w(rng, 3, 2)
    w = _w(rng, *(shape[:-3] + (2, 4, 4)))
    assert grad_check(lambda t: ad.sum_(ad.conv1x1(t, k) * w), x) < 1e-6
    assert grad_check(lambda t: ad.sum_(ad.conv1x1(x, t) * w), k) < 1e-6


# -- conv2d ---------------------------------------------------------------

def _conv_reference(x, w):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, cout, h, wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                out[:, o, i, j] = np.sum(xp[:, :, i:i + k, j:j + k] * w[o], axis=(1, 2, 3))
    return out


def test_conv2d_matches_loop_reference(rng):
    x, w = _w(rng, 2, 3, 5, 6), _w(rng, 4, 3, 3, 3)
    assert np.allclose(ad.conv2d(x, w).values, _conv_reference(x, w), rtol=0, atol=1e-12)


def test_conv2d_gradients(rng):
    x, w = _w(rng, 2, 2, 4, 4), _w(rng, 3, 2, 3, 3)
    up = _w(rng, 2, 3, 4, 4)
    assert grad_check(lambda t: ad.sum_(ad.conv2d(t, w) * up), x) < 1e-6
    assert grad_check(lambda t: ad.sum_(ad.conv2d(x, t) * up), w) < 1e-6


def test_conv2d_rejects_even_kernel():
    with pytest.raises(DimensionError):
        ad.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)))


# -- pooling --------------------------------------------------------------

def test_avg_pool_constant_and_hand_value():
    assert np.all(ad.avg_pool_spatial(np.full((3, 4, 5), 1.5)).values == 1.5)
    assert ad.avg_pool_spatial(np.array([[[1.0, 2.0], [3.0, 4.0]]])).values.tolist() == [2.5]


def test_avg_pool_gradient_is_uniform_share(rng):
    x = _w(rng, 2, 3, 4)
    tape = Tape()
    t = tape.leaf(x)
    g = tape.backward(ad.sum_(ad.avg_pool_spatial(t)))[t]
    assert np.allclose(g, 1.0 / 12, rtol=0, atol=1e-15)
    assert grad_check(lambda v: ad.sum_(ad.avg_pool_spatial(v) * np.array([1.0, -2.0])), x) < 1e-6


def test_avg_pool2_gradients(rng):
    x = _w(rng, 2, 4, 6)
    w = _w(rng, 2, 2, 3)
    assert grad_check(lambda v: ad.sum_(ad.avg_pool2(v) * w), x) < 1e-6


def test_max_pool_hand_value_and_ties():
    assert ad.max_pool_spatial(np.array([[[1.0, 9.0], [3.0, 4.0]]])).values.tolist() == [9.0]
    tape = Tape()
    t = tape.leaf(np.full((1, 2, 2), 3.0))
    out = ad.max_pool_spatial(t)
    assert out.values.tolist() == [3.0]
    g = tape.backward(ad.sum_(out))[t]
    assert g[0, 0, 0] == 1.0 and g.sum() == 1.0


def test_max_pool_gradient_mask_one_nonzero_per_map(rng):
    x = rng.integers(0, 3, size=(4, 5, 3, 3)).astype(float)  # plenty of ties
    tape = Tape()
    t = tape.leaf(x)
    g = tape.backward(ad.sum_(ad.max_pool_spatial(t) * rng.uniform(1, 2, size=(4, 5))))[t]
    for i in range(4):
        for k in range(5):
            nz = np.argwhere(g[i, k] != 0)
            assert len(nz) == 1
            # brute force: first maximal cell in row-major order
            flat = x[i, k].ravel()
            assert tuple(nz[0]) == np.unravel_index(int(np.flatnonzero(flat == flat.max())[0]), (3, 3))


def test_max_pool_gradients_without_ties(rng):
    x = _w(rng, 3, 4, 4)
    assert grad_check(lambda v: ad.sum_(ad.max_pool_spatial(v) * np.array([1.0, 2.0, -1.0])), x) < 1e-6


# -- softmax / entropy ----------------------------------------------------

def test_softmax_symmetry_and_stability():
    assert ad.softmax([0.0, 0.0]).values.tolist() == [0.5, 0.5]
    out = ad.softmax([1000.0, 1000.0]).values
    assert np.all(np.isfinite(out)) and out.tolist() == [0.5, 0.5]


def test_softmax_jacobian(rng):
    x = _w(rng, 5)
    for i in range(5):
        assert grad_check(lambda v: ad.sum_(ad.softmax(v) * np.eye(5)[i]), x) < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_simplex_and_shift_invariance(logits, c):
    p = ad.softmax(logits).values
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.allclose(ad.softmax(logits + c).values, p, rtol=0, atol=1e-12)


def test_entropy_reference_values():
    assert math.isclose(ad.entropy(np.full(7, 1 / 7)).item(), math.log(7), rel_tol=1e-12)
    assert ad.entropy([0.0, 1.0, 0.0]).item() == 0.0
    assert round(ad.entropy([0.5, 0.5]).item(), 6) == 0.693147


def test_entropy_rejects_non_simplex():
    with pytest.raises(ContractError):
        ad.entropy([0.5, 0.6])
    with pytest.raises(ContractError):
        ad.entropy([1.2, -0.2])
    ad.entropy([0.5, 0.5 + 5e-10])  # inside tolerance


def test_entropy_directional_gradient_on_simplex(rng):
    # perturbations must stay on the simplex, so probe zero-sum directions
    for _ in range(10):
        p = simplex_point(rng, 6)
        d = zero_sum_direction(rng, 6)
        assert directional_check(lambda v: ad.entropy(v), p, d) < 1e-6


def test_entropy_floor_only_inside_log():
    tape = Tape()
    p = tape.leaf([0.0, 0.25, 0.75])
    g = tape.backward(ad.entropy(p))[p]
    assert np.isfinite(g).all()
    # zero entry contributes -log(floor) to its gradient; the multiplier stays 0
    assert math.isclose(g[0], -math.log(1e-12), rel_tol=1e-12)


def test_entropy_of_softmax_gradients(rng):
    for _ in range(10):
        assert grad_check(lambda v: ad.entropy(ad.softmax(v)), _w(rng, 5)) < 1e-5


def test_log_softmax_cross_entropy_gradients(rng):
    for _ in range(10):
        y = np.eye(4)[rng.integers(4)]
        assert grad_check(lambda v: -ad.sum_(ad.log_softmax(v) * y), _w(rng, 4)) < 1e-5


# -- elementwise ops ------------------------------------------------------

@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_broadcast_binary_gradients(rng, op):
    fn = getattr(ad, op)
    a, b = _w(rng, 3, 4), _w(rng, 4)
    w = _w(rng, 3, 4)
    assert grad_check(lambda t: ad.sum_(fn(t, b) * w), a) < 1e-6
    assert grad_check(lambda t: ad.sum_(fn(a, t) * w), b) < 1e-6


def test_broadcast_error():
    with pytest.raises(DimensionError):
        ad.add(np.ones(3), np.ones(4))


def test_unary_and_reduction_gradients(rng):
    x = _w(rng, 3, 4)
    w = _w(rng, 3, 4)
    x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep relu away from its kink
    assert grad_check(lambda t: ad.sum_(ad.relu(t) * w), x) < 1e-6
    assert grad_check(lambda t: ad.sum_(ad.square(t) * w), x) < 1e-6
    assert grad_check(lambda t: ad.sum_(ad.scale(t, -2.5) * w), x) < 1e-6
    assert grad_check(lambda t: ad.sum_(ad.sum_(t * w, axis=1) * np.array([1.0, 2.0, 3.0])), x) < 1e-6
    assert grad_check(lambda t: ad.mean(ad.square(t)), x) < 1e-6
    assert grad_check(lambda t: ad.sum_(ad.reshape(t, (4, 3)) * w.reshape(4, 3)), x) < 1e-6


# -- tape semantics -------------------------------------------------------

def test_backward_sum_and_squared_norm(rng):
    x0 = _w(rng, 5)
    tape = Tape()
    x = tape.leaf(x0)
    assert np.array_equal(tape.backward(ad.sum_(x))[x], np.ones(5))
    tape = Tape()
    x = tape.leaf(x0)
    assert np.allclose(tape.backward(ad.sum_(ad.square(x)))[x], 2 * x0, rtol=0, atol=1e-15)


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ContractError):
        tape.backward(ad.scale(x, 2.0))


def test_unreached_leaf_gets_zero_gradient():
    tape = Tape()
    x, y = tape.leaf(np.ones(2)), tape.leaf(np.ones(3))
    g = tape.backward(ad.sum_(x))
    assert np.array_equal(g[y], np.zeros(3))


def test_mixing_tapes_is_an_error():
    a, b = Tape().leaf([1.0]), Tape().leaf([2.0])
    with pytest.raises(ContractError):
        ad.add(a, b)


def test_detach_blocks_gradient():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    g = tape.backward(ad.sum_(x * ad.detach(x)))[x]
    assert g.tolist() == [1.0, 2.0]


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.values[0] = 3.0


def test_backward_is_linear(rng):
    x0 = _w(rng, 4, 3)
    w = _w(rng, 3, 2)
    alpha, beta = 0.7, -1.3

    def grads(fn):
        tape = Tape()
        x = tape.leaf(x0)
        return tape.backward(fn(x))[x]

    l1 = lambda x: ad.sum_(ad.square(ad.matmul(x, w)))
    l2 = lambda x: ad.entropy(ad.softmax(ad.reshape(x, (12,))))
    combo = grads(lambda x: ad.scale(l1(x), alpha) + ad.scale(l2(x), beta))
    assert np.allclose(combo, alpha * grads(l1) + beta * grads(l2), rtol=0, atol=1e-12)


def test_backward_deterministic(rng):
    x0 = _w(rng, 2, 3, 4, 4)
    w = _w(rng, 4, 3, 3, 3)

    def run():
        tape = Tape()
        x = tape.leaf(x0)
        return tape.backward(ad.sum_(ad.relu(ad.conv2d(x, w))))[x]

    assert np.array_equal(run(), run())


def test_grad_check_sum_is_exact(rng):
    assert grad_check(lambda v: ad.sum_(v), _w(rng, 3, 3)) < 1e-10


def test_forward_values_finite_on_finite_inputs(rng):
    x = _w(rng, 2, 3, 4, 4) * 100
    out = ad.entropy(ad.softmax(ad.reshape(ad.conv2d(x, _w(rng, 2, 3, 3, 3)), (2, 32))))
    assert np.all(np.isfinite(out.values))
