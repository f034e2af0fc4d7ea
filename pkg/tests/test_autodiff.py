import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from toib import autodiff as ad
from toib.autodiff import DomainError, ShapeError, Tensor
from toib.gradcheck import TOLERANCE, check, op_cases, relative_error

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_matmul_identity_and_hand_sum():
    b = np.array([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_smooth_tolerance():
    rng = np.random.default_rng(1)
    err = check(lambda a, b: ad.sum(ad.matmul(a, b)), [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))])
    assert err < 1e-6


def test_relu_values_and_kink():
    x = leaf([-1.0, 0.0, 2.0])
    y = ad.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    ad.backward(ad.sum(y))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


@given(arrays(np.float64, 5, elements=st.floats(1e-3, 1e3)))
def test_exp_log_inverse(x):
    np.testing.assert_allclose(ad.exp(ad.log(Tensor(x))).data, x, rtol=1e-12)


def test_log_domain():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.log(Tensor([-1.0]))


def test_tanh_derivative_at_zero():
    x = leaf(0.0)
    ad.backward(ad.tanh(x))
    assert x.grad == pytest.approx(1.0)
    assert check(lambda a: ad.tanh(a), [np.array(0.0)]) < 1e-8


def test_incompatible_shapes():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_scalar_broadcast_gradient():
    a, c = leaf(np.ones((2, 3))), leaf(2.0)
    ad.backward(ad.sum(ad.mul(a, c)))
    assert c.grad == pytest.approx(6.0)
    np.testing.assert_array_equal(a.grad, np.full((2, 3), 2.0))


def test_reductions():
    assert ad.sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    with pytest.raises(ShapeError):
        ad.mean(Tensor(np.zeros((0, 3))), axis=0)
    with pytest.raises(ShapeError):
        ad.sum(Tensor(np.ones((2, 3))), axis=2)
    x = leaf(np.arange(5.0))
    ad.backward(ad.mean(x))
    np.testing.assert_allclose(x.grad, np.full(5, 0.2))


def test_reparam_sample():
    mu = np.array([[0.5, -1.0]])
    np.testing.assert_array_equal(ad.reparam_sample(Tensor(mu), Tensor(np.zeros((1, 2))), np.zeros((1, 2))).data, mu)
    assert ad.reparam_sample(Tensor([[0.0]]), Tensor([[0.0]]), np.ones((1, 1))).item() == 1.0
    with pytest.raises(ShapeError):
        ad.reparam_sample(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))), np.zeros((1, 2)))


def test_reparam_logvar_gradient_closed_form():
    rng = np.random.default_rng(2)
    lv, eps = rng.uniform(-2, 2, (3, 2)), rng.standard_normal((3, 2))
    mu_t, lv_t = leaf(np.zeros((3, 2))), leaf(lv)
    ad.backward(ad.sum(ad.reparam_sample(mu_t, lv_t, eps)))
    np.testing.assert_allclose(lv_t.grad, 0.5 * np.exp(0.5 * lv) * eps, rtol=1e-12)
    np.testing.assert_array_equal(mu_t.grad, np.ones((3, 2)))


def test_backward_examples():
    x = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x = leaf([1.0, 2.0])
    ad.backward(ad.sum(ad.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_contract():
    with pytest.raises(ValueError):
        ad.backward(leaf([1.0, 2.0]))
    with pytest.raises(ValueError):
        ad.backward(ad.log(leaf(np.inf)))


def test_backward_accumulates():
    x = leaf([1.0, 2.0])
    ad.backward(ad.sum(x))
    ad.backward(ad.sum(x))
    assert x.grad.tolist() == [2.0, 2.0]


def test_shared_subexpression_sums_contributions():
    x = leaf(3.0)
    y = ad.mul(x, x)
    ad.backward(ad.add(y, ad.exp(y)))  # d/dx (x^2 + e^{x^2})
    assert x.grad == pytest.approx(2 * 3.0 * (1 + np.exp(9.0)), rel=1e-12)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad


@pytest.mark.parametrize("name", sorted(op_cases(np.random.default_rng(0))))
def test_every_op_matches_finite_differences(name):
    fn, xs = op_cases(np.random.default_rng(7))[name]
    assert check(fn, [x.copy() for x in xs]) <= TOLERANCE


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_log_softmax_gradient_property(x):
    w = np.linspace(-1, 1, 12).reshape(3, 4)
    assert check(lambda a: ad.sum(ad.mul(ad.log_softmax(a), w)), [x]) < 1e-6


@given(arrays(np.float64, (2, 3), elements=finite))
def test_forward_bitwise_deterministic(x):
    f = lambda: ad.sum(ad.tanh(ad.matmul(Tensor(x), Tensor(x.T)))).data  # noqa: E731
    assert f().tobytes() == f().tobytes()


def test_relative_error_zero_for_equal():
    assert relative_error(np.ones(3), np.ones(3)) == 0.0
