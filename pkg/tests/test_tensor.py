import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from ubw import tensor as T
from ubw.errors import BackwardError, DomainError, HigherOrderError, ShapeError
from ubw.nn import cross_entropy
from ubw.tensor import Tensor, grad, grad_of_grad

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


# -- forward examples -------------------------------------------------------


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.eye(2))).data, a)


def test_relu_example():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_softmax_symmetric_row():
    np.testing.assert_array_equal(T.softmax(Tensor([[0.0, 0.0]]), axis=1).data, [[0.5, 0.5]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_log_of_nonpositive_raises_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]))


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# -- backward examples ------------------------------------------------------


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad.item() == 6.0


def test_softmax_cross_entropy_gradient():
    z = np.array([[0.3, -1.2, 2.0]])
    zt = Tensor(z, requires_grad=True)
    cross_entropy(T.softmax(zt, axis=1), [3]).backward()
    expected = np.exp(z) / np.exp(z).sum() - np.array([[0.0, 0.0, 1.0]])
    np.testing.assert_allclose(zt.grad.data, expected, rtol=1e-12, atol=1e-14)


def test_cube_second_derivative():
    x = Tensor(2.0, requires_grad=True)
    (g,) = grad(x**3, x, create_graph=True)
    assert g.item() == pytest.approx(12.0)
    assert grad_of_grad(g, x).item() == pytest.approx(12.0)


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    y.backward()
    with pytest.raises(BackwardError):
        y.backward()


def test_backward_twice_allowed_with_retained_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    y.backward(retain_graph=True)
    y.backward()
    np.testing.assert_array_equal(x.grad.data, [4.0, 8.0])


def test_backward_needs_scalar_and_tape():
    with pytest.raises(BackwardError):
        Tensor([1.0, 2.0], requires_grad=True).sum().detach().backward()
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(BackwardError):
        (x * 2).backward()


# -- grad of grad -----------------------------------------------------------


def test_grad_norm_squared_example():
    x = Tensor([1.0, 2.0], requires_grad=True)
    w = Tensor([0.7, -0.3], requires_grad=True)
    (gw,) = grad((w * x).sum(), w, create_graph=True)
    out = grad_of_grad((gw * gw).sum(), x)
    np.testing.assert_allclose(out.data, [2.0, 4.0])


def test_grad_of_grad_rejects_first_order_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    w = Tensor([0.7, -0.3], requires_grad=True)
    (gw,) = grad((w * x).sum(), w)
    with pytest.raises(HigherOrderError):
        grad_of_grad((gw * gw).sum(), x)


def test_grad_of_grad_independent_objective_is_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    w = Tensor([0.7, -0.3], requires_grad=True)
    (gw,) = grad((w * w).sum(), w, create_graph=True)
    out = grad_of_grad((gw * gw).sum(), x)
    np.testing.assert_array_equal(out.data, [0.0, 0.0])


def test_cosine_of_linear_loss_gradient_matches_fd():
    rng = np.random.default_rng(3)
    g_fixed = rng.standard_normal(5)
    w0 = rng.standard_normal(5)

    def objective(x_arr, create):
        x = Tensor(x_arr, requires_grad=True)
        w = Tensor(w0, requires_grad=True)
        # L_t = w . (x * x): linear in w, gradient x*x
        (gw,) = grad((w * (x * x)).sum(), w, create_graph=create)
        gf = Tensor(g_fixed)
        cos = (gw * gf).sum() / (T.sqrt((gw * gw).sum()) * T.sqrt((gf * gf).sum()))
        return x, cos

    x0 = rng.standard_normal(5)
    x, cos = objective(x0, True)
    ad = grad_of_grad(cos, x).data
    fd = oracles.fd_grad(lambda a: objective(a, False)[1].item(), x0, step=1e-6)
    assert oracles.rel_err(ad, fd) <= 1e-6


def test_second_order_matches_fd_of_first_order():
    rng = np.random.default_rng(4)
    w0 = rng.standard_normal((4, 3))
    x0 = rng.standard_normal((2, 4))

    def grad_sq(x_arr, create):
        x = Tensor(x_arr, requires_grad=True)
        w = Tensor(w0, requires_grad=True)
        loss = T.log_softmax(T.matmul(x, w), axis=1)[:, 0].sum()
        (gw,) = grad(loss, w, create_graph=create)
        return x, (gw * gw).sum()

    x, obj = grad_sq(x0, True)
    ad = grad_of_grad(obj, x).data
    fd = oracles.fd_grad(lambda a: grad_sq(a, False)[1].item(), x0)
    assert oracles.rel_err(ad, fd) <= 1e-3


# -- finite-difference sweep ------------------------------------------------


@pytest.mark.parametrize("name", oracles.PRIMITIVES)
def test_primitive_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(oracles.primitive_rel_err(name, rng) for _ in range(100))
    assert worst <= 1e-4


# -- invariants -------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(z):
    s = T.softmax(Tensor(z), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)), finite, finite)
def test_clamp_stays_within_bounds(x, a, b):
    lo, hi = min(a, b), max(a, b)
    out = T.clamp(Tensor(x), lo, hi).data
    assert np.all(out >= lo) and np.all(out <= hi)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_backward_is_linear_over_independent_graphs(a, b):
    xa = Tensor(a, requires_grad=True)
    xb = Tensor(b, requires_grad=True)
    (T.exp(xa).sum() + (xb * xb * xb).sum()).backward()
    ya = Tensor(a, requires_grad=True)
    yb = Tensor(b, requires_grad=True)
    T.exp(ya).sum().backward()
    (yb * yb * yb).sum().backward()
    np.testing.assert_array_equal(xa.grad.data, ya.grad.data)
    np.testing.assert_array_equal(xb.grad.data, yb.grad.data)


def test_grad_shape_matches_tensor():
    x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    (x * 2).sum().backward()
    assert x.grad.shape == x.shape


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad
