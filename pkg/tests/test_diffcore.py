import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from minlp_l2o import diffcore as dc


def test_square_gradient_at_three():
    x = dc.leaf(3.0)
    grads = dc.backward(dc.square(x))
    assert grads[x] == pytest.approx(6.0)


def test_relu_kink_uses_zero_subgradient():
    x = dc.leaf([-1.0, 0.0, 2.0])
    g = dc.backward(dc.sum(dc.relu(x)))[x]
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_pos_l1_value_and_gradient():
    x = dc.leaf([0.5, -1.0, 0.0, 2.0])
    out = dc.pos_l1(x)
    assert float(out.value) == 2.5
    np.testing.assert_array_equal(dc.backward(out)[x], [1.0, 0.0, 0.0, 1.0])


def test_floor_surrogate_passes_identity_gradient():
    x = dc.leaf([2.7, -0.2])
    y = dc.attach_surrogate(x, dc.FLOOR_STE)
    np.testing.assert_array_equal(y.value, [2.0, -1.0])
    np.testing.assert_array_equal(dc.backward(dc.sum(y * 3.0))[x], [3.0, 3.0])


def test_round_half_down():
    np.testing.assert_array_equal(dc.round_half_down(np.array([2.4, 2.5, 2.6, -0.5, -0.6])),
                                  [2.0, 2.0, 3.0, -1.0, -1.0])


def test_step_rule_is_strict():
    v = dc.leaf([0.5, 0.5000001, 0.2])
    np.testing.assert_array_equal(dc.attach_surrogate(v, dc.STEP_STE).value, [0.0, 1.0, 0.0])


def test_grad_check_rejects_surrogates():
    with pytest.raises(dc.SurrogateOnPathError):
        dc.grad_check(lambda x: dc.sum(dc.attach_surrogate(x, dc.FLOOR_STE)), [1.3])


def test_grad_check_small_on_smooth_function():
    err = dc.grad_check(lambda x: dc.sum(dc.sin(x) * dc.exp(x)), [0.1, -0.4, 1.2])
    assert err < 1e-8


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        dc.backward(dc.leaf([1.0, 2.0]))


def test_nonfinite_leaf_rejected():
    with pytest.raises(ValueError):
        dc.leaf([1.0, np.nan])


def test_shape_mismatch_raises():
    with pytest.raises(dc.ShapeError):
        dc.leaf(np.ones(3)) + dc.leaf(np.ones(4))


def test_constant_gets_no_gradient():
    x = dc.leaf([1.0, 2.0])
    c = dc.constant([3.0, 4.0])
    grads = dc.backward(dc.sum(x * c))
    assert c not in grads
    np.testing.assert_array_equal(grads[x], [3.0, 4.0])


def test_shared_subexpression_accumulates():
    x = dc.leaf(2.0)
    y = x * x
    grads = dc.backward(y + y)
    assert grads[x] == pytest.approx(8.0)


def test_ndarray_on_left_dispatches_to_node():
    x = dc.leaf([1.0, 2.0])
    out = np.array([3.0, 3.0]) - x
    assert isinstance(out, dc.Node)
    np.testing.assert_array_equal(dc.backward(dc.sum(out))[x], [-1.0, -1.0])


def test_matmul_and_transpose_gradients():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(5, 4))
    err = dc.grad_check(lambda w: dc.sum(dc.square(dc.constant(a) @ dc.transpose(w))), b)
    assert err < 1e-7


def test_slice_with_fancy_index_accumulates():
    x = dc.leaf([1.0, 2.0, 3.0])
    out = dc.sum(x[np.array([0, 0, 2])])
    np.testing.assert_array_equal(dc.backward(out)[x], [2.0, 0.0, 1.0])


def test_deep_chain_does_not_recurse():
    x = dc.leaf(1.0)
    y = x
    for _ in range(5000):
        y = y * 1.0
    assert dc.backward(y)[x] == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-3, 3)), arrays(np.float64, 4, elements=st.floats(-3, 3)))
def test_product_rule(a, b):
    x = dc.leaf(a)
    grads = dc.backward(dc.sum(x * b + dc.square(x)))
    np.testing.assert_allclose(grads[x], b + 2 * a, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_mean_matches_sum_over_count(a):
    x = dc.leaf(a)
    g_mean = dc.backward(dc.mean(x, axis=0)[1])[x]
    expected = np.zeros_like(a)
    expected[:, 1] = 0.5
    np.testing.assert_allclose(g_mean, expected)


def test_relu_and_matvec_examples():
    np.testing.assert_array_equal(dc.relu(dc.constant([-1.0, 2.0])).value, [0.0, 2.0])
    np.testing.assert_array_equal((dc.constant(np.eye(2)) @ dc.constant([3.0, 4.0])).value, [3.0, 4.0])


def test_sin_gradient_at_zero():
    x = dc.leaf(0.0)
    assert dc.backward(dc.sin(x))[x] == pytest.approx(1.0)


@pytest.mark.parametrize("fn", [lambda x: dc.sum(x * x), lambda x: dc.sum(dc.sin(x))])
def test_grad_check_examples(fn):
    assert dc.grad_check(fn, [0.3, -1.2, 0.7, 2.0]) <= 1e-6


def test_constant_function_has_zero_gradient():
    assert dc.grad_check(lambda x: dc.sum(x * 0.0) + 5.0, [1.0, 2.0]) == 0.0
