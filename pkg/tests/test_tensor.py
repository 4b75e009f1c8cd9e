import numpy as np
import pytest
from hypothesis import given, strategies as st

from cascadedose import ops
from cascadedose.gradcheck import GradCheckReport, fd_step, grad_check, relative_error
from cascadedose.tensor import DimensionError, Tensor, no_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_shared_subexpression_accumulates():
    x = leaf([2.0])
    y = x * x + x  # dy/dx = 2x + 1
    ops.sum(y).backward()
    assert x.grad[0] == 5.0


def test_leaf_grads_accumulate_across_calls():
    x = leaf([1.0, 2.0])
    ops.sum(ops.mul_scalar(x, 3.0)).backward()
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_backward_needs_scalar_or_seed():
    x = leaf(np.ones(3))
    y = ops.mul_scalar(x, 2.0)
    with pytest.raises(DimensionError):
        y.backward()
    y.backward(np.array([1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 4.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = ops.exp(x)
    assert y.node is None and not y.requires_grad


def test_deep_chain_does_not_recurse():
    x = leaf([0.5])
    y = x
    for _ in range(5000):
        y = ops.add_scalar(y, 0.0)
    ops.sum(y).backward()
    assert x.grad[0] == 1.0


def test_constants_get_no_grad():
    c = Tensor(np.ones(2))
    x = leaf([1.0, 2.0])
    ops.sum(ops.mul(c, x)).backward()
    assert c.grad is None


def test_shape_mismatch_rejected():
    with pytest.raises(DimensionError):
        ops.add(leaf(np.ones(2)), leaf(np.ones(3)))
    with pytest.raises(DimensionError):
        ops.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_softmax_rows_sum_to_one(rng):
    z = Tensor(rng.standard_normal((5, 7)) * 30)
    np.testing.assert_allclose(ops.softmax(z, axis=-1).data.sum(-1), 1.0, atol=1e-12)


def test_layer_norm_normalizes(rng):
    x = Tensor(rng.standard_normal((4, 9)) * 3 + 2)
    y = ops.layer_norm(x, Tensor(np.ones(9)), Tensor(np.zeros(9)), eps=0.0)
    np.testing.assert_allclose(y.data.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.data.std(-1), 1, atol=1e-12)


def test_gelu_uses_erf():
    from scipy.special import erf
    x = np.linspace(-4, 4, 17)
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, 0.5 * x * (1 + erf(x / np.sqrt(2))), rtol=1e-12)


def test_mish_definition():
    x = np.linspace(-30, 30, 61)
    np.testing.assert_allclose(ops.mish(Tensor(x)).data, x * np.tanh(np.log1p(np.exp(x))), rtol=1e-12, atol=1e-300)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_sum_of_squares_gradient(vals):
    x = leaf(vals)
    ops.sum(ops.square(x)).backward()
    np.testing.assert_allclose(x.grad, 2 * np.asarray(vals), rtol=1e-12, atol=0)


def test_fd_step_and_relative_error():
    assert fd_step(0.1) == 6e-6
    assert fd_step(-100.0) == pytest.approx(6e-4)
    assert relative_error(np.float64(0), np.float64(0)) == 0.0
    assert relative_error(np.float64(1.0), np.float64(3.0)) == pytest.approx(0.5)


def test_grad_check_catches_a_wrong_backward():
    from cascadedose.tensor import make_result

    def bad_square(x):
        return make_result(x.data ** 2, (x,), "bad_square", lambda g: (g * x.data,))  # missing factor 2

    rep = grad_check(lambda x: bad_square(x), [leaf([0.7, -1.3])], name="bad")
    assert isinstance(rep, GradCheckReport)
    assert not rep.passed and rep.max_relative_error > 0.1
    assert "FAIL" in rep.row()


def test_grad_check_passes_composite(rng):
    x, w = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    rep = grad_check(lambda x, w: ops.softmax(ops.matmul(ops.gelu(x), w)), [x, w])
    assert rep.passed and rep.element_count == 20
