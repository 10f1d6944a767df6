"""Tensor core: forward correctness, gradients, finiteness guards, optimizers."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sscpipe import autodiff as ad
from sscpipe.autodiff import (Adam, DimensionError, NonFiniteError, Parameter,
                              SGD, Tensor, gradcheck)

RNG = np.random.default_rng(0)

finite_floats = st.floats(min_value=-10.0, max_value=10.0,
                          allow_nan=False, allow_infinity=False)


def small_arrays(shape):
    return arrays(np.float64, shape, elements=finite_floats)


# -- forward correctness -----------------------------------------------------

def test_elementwise_forward_matches_numpy():
    x = RNG.standard_normal((3, 4))
    y = RNG.standard_normal((3, 4))
    assert np.allclose(ad.add(Tensor(x), Tensor(y)).data, x + y)
    assert np.allclose(ad.mul(Tensor(x), Tensor(y)).data, x * y)
    assert np.allclose(ad.exp(Tensor(x)).data, np.exp(x))
    assert np.allclose(ad.relu(Tensor(x)).data, np.maximum(x, 0))
    assert np.allclose(ad.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)))
    assert np.allclose(ad.tanh(Tensor(x)).data, np.tanh(x))


def test_operator_sugar():
    a, b = Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0]))
    assert np.allclose((a + b).data, [4.0, 6.0])
    assert np.allclose((a - b).data, [-2.0, -2.0])
    assert np.allclose((a * b).data, [3.0, 8.0])
    assert np.allclose((a / b).data, [1 / 3, 0.5])
    assert np.allclose((-a).data, [-1.0, -2.0])


@settings(max_examples=30, deadline=None)
@given(small_arrays((4, 6)))
def test_softmax_is_a_distribution(x):
    p = ad.softmax(Tensor(x), axis=1).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(small_arrays((3, 3)))
def test_matmul_identity(a):
    out = ad.matmul(Tensor(a), Tensor(np.eye(3))).data
    assert np.max(np.abs(out - a)) < 1e-10


@settings(max_examples=25, deadline=None)
@given(small_arrays((2, 3)), small_arrays((3, 4)), small_arrays((4, 2)))
def test_matmul_associativity(a, b, c):
    lhs = ad.matmul(ad.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
    rhs = ad.matmul(Tensor(a), ad.matmul(Tensor(b), Tensor(c))).data
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_pow_base_forward():
    beta = Tensor(np.array([0.5, 0.9]))
    m = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = ad.pow_base(ad.reshape(beta, (2, 1, 1)), Tensor(np.broadcast_to(m, (2, 2, 2)).copy()))
    expect = np.stack([0.5 ** m, 0.9 ** m])
    assert np.allclose(out.data, expect)


def test_trilinear_at_lattice_points_and_midpoint():
    vol = Tensor(RNG.standard_normal((2, 3, 4, 5)))
    coords = np.array([[0.0, 0.0, 0.0], [2.0, 3.0, 4.0], [1.0, 2.0, 3.0]])
    out = ad.trilinear_sample(vol, Tensor(coords)).data
    assert np.allclose(out[0], vol.data[:, 0, 0, 0])
    assert np.allclose(out[1], vol.data[:, 2, 3, 4])
    assert np.allclose(out[2], vol.data[:, 1, 2, 3])
    mid = ad.trilinear_sample(vol, Tensor(np.array([[0.5, 0.5, 0.5]]))).data[0]
    corners = vol.data[:, 0:2, 0:2, 0:2].reshape(2, 8).mean(axis=1)
    assert np.allclose(mid, corners)


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("fn,shapes", [
    (lambda a, b: ad.tsum(ad.add(a, b)), [(3, 4), (3, 4)]),
    (lambda a, b: ad.tsum(ad.mul(a, b)), [(3, 4), (4,)]),  # broadcast
    (lambda a, b: ad.tsum(ad.div(a, b)), [(3,), (3,)]),
    (lambda a: ad.tsum(ad.exp(a)), [(4,)]),
    (lambda a: ad.tsum(ad.tanh(a)), [(4,)]),
    (lambda a: ad.tsum(ad.sigmoid(a)), [(4,)]),
    (lambda a: ad.tsum(ad.powf(ad.mul(a, a), 1.5)), [(4,)]),
    (lambda a: ad.tsum(ad.mul(ad.softmax(a, axis=0), np.arange(4.0))), [(4,)]),
    (lambda a: ad.mean(ad.transpose(a, (1, 0))), [(2, 3)]),
    (lambda a: ad.tsum(ad.reshape(a, (6,))), [(2, 3)]),
])
def test_primitive_gradchecks(fn, shapes):
    rng = np.random.default_rng(42)
    inputs = [Tensor(rng.uniform(0.5, 2.0, s)) for s in shapes]
    assert gradcheck(fn, inputs) < 1e-6


def test_gather_scatter_concat_gradchecks():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((5, 3)))
    idx = np.array([0, 2, 2, 4])
    w = rng.standard_normal((4, 3))
    assert gradcheck(lambda x: ad.tsum(ad.mul(ad.gather_rows(x, idx), w)), [x]) < 1e-6

    vals = Tensor(rng.standard_normal((4, 3)))
    w2 = rng.standard_normal((6, 3))
    assert gradcheck(
        lambda v: ad.tsum(ad.mul(ad.scatter_add_rows(v, idx, 6), w2)), [vals]) < 1e-6

    a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((1, 3)))
    w3 = rng.standard_normal((3, 3))
    assert gradcheck(lambda a, b: ad.tsum(ad.mul(ad.concat([a, b], axis=0), w3)), [a, b]) < 1e-6


def test_gradient_accumulates_on_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # d/dx (x^2 + x) = 2x + 1 = 5
    y.backward()
    assert np.allclose(x.grad, [5.0])


def test_pow_base_gradcheck():
    rng = np.random.default_rng(3)
    beta = Tensor(rng.uniform(0.3, 0.9, (2, 1, 1)))
    m = Tensor(rng.uniform(0.0, 3.0, (2, 3, 3)))
    w = rng.standard_normal((2, 3, 3))
    assert gradcheck(lambda b, m: ad.tsum(ad.mul(ad.pow_base(b, m), w)), [beta, m]) < 1e-6


# -- error handling -----------------------------------------------------------

def test_nonfinite_detection():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor(np.array([-1.0])))
    with pytest.raises(NonFiniteError):
        ad.div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor(np.array([1e4])))


def test_constructor_rejects_nan():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_optimizer_aborts_on_nonfinite_grad_naming_param():
    p = Parameter(np.zeros(2), name="culprit")
    p.grad = np.array([np.inf, 0.0])
    with pytest.raises(NonFiniteError, match="culprit"):
        SGD([p], lr=0.1).step()
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError, match="culprit"):
        Adam([p], lr=0.1).step()


def test_gradcheck_rejects_nonscalar_and_bad_step():
    x = Tensor(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        gradcheck(lambda x: x, [x])
    with pytest.raises(ValueError):
        gradcheck(lambda x: ad.tsum(x), [x], step=1.0)


# -- optimizers ----------------------------------------------------------------

def test_adam_solves_quadratic_bowl():
    rng = np.random.default_rng(11)
    target = rng.standard_normal(6)
    p = Parameter(np.zeros(6), name="x")
    opt = Adam([p], lr=0.05)
    for _ in range(200):
        opt.zero_grad()
        diff = ad.add(p, -target)
        loss = ad.tsum(ad.mul(diff, diff))
        loss.backward()
        opt.step()
    assert float(np.sum((p.data - target) ** 2)) < 1e-6


def test_sgd_descends():
    p = Parameter(np.array([4.0]), name="x")
    opt = SGD([p], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        loss = ad.mul(p, p)
        loss = ad.tsum(loss)
        loss.backward()
        opt.step()
    assert abs(p.data[0]) < 1e-6
