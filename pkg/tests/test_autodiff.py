"""Engine correctness: every primitive against central finite differences,
plus the tape bookkeeping rules (accumulation, constant folding)."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objcap import autodiff as ad
from helpers import check_grad, fd_gradient

RNG = np.random.default_rng(20240817)


def scalarize(v):
    # reduce any node to a scalar with nontrivial weights so vjp paths
    # beyond plain sums get exercised
    w = ad.constant(np.linspace(0.5, 1.5, v.value.size).reshape(v.value.shape))
    return ad.vsum(ad.mul(v, w))


def test_product_gradient():
    x = ad.leaf(np.array(3.0))
    y = ad.leaf(np.array(-2.0))
    f = ad.mul(x, y)
    ad.backward(f)
    assert x.grad == pytest.approx(-2.0)
    assert y.grad == pytest.approx(3.0)


def test_exp_neg_at_zero():
    x = ad.leaf(np.array(0.0))
    f = ad.exp(ad.neg(x))
    ad.backward(f)
    assert x.grad == pytest.approx(-1.0)


def test_accumulation_without_reset():
    x = ad.leaf(np.array(2.0))
    f1 = ad.mul(x, x)
    ad.backward(f1)
    g1 = x.grad.copy()
    f2 = ad.mul(ad.constant(3.0), x)
    ad.backward(f2)
    assert x.grad == pytest.approx(g1 + 3.0)


def test_backward_requires_scalar_root():
    x = ad.leaf(np.ones(4))
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, x))


def test_constant_folding_skips_tape():
    a = ad.constant(np.ones(3))
    b = ad.constant(np.ones(3))
    out = ad.add(ad.mul(a, b), b)
    assert not out.requires
    assert out._vjp is None


def test_constant_subgraph_gets_no_grad():
    x = ad.leaf(np.array(2.0))
    c = ad.constant(np.array(5.0))
    f = ad.add(ad.mul(x, x), ad.mul(c, c))
    ad.backward(f)
    assert x.grad == pytest.approx(4.0)
    assert c.grad is None


@pytest.mark.parametrize("op,domain", [
    (ad.exp, (-2.0, 2.0)),
    (ad.log, (0.1, 3.0)),
    (ad.sqrt, (0.1, 4.0)),
    (ad.sin, (-3.0, 3.0)),
    (ad.cos, (-3.0, 3.0)),
    (ad.softplus, (-5.0, 5.0)),
    (ad.sigmoid, (-5.0, 5.0)),
    (ad.square, (-2.0, 2.0)),
    (ad.neg, (-2.0, 2.0)),
])
def test_unary_fd(op, domain):
    lo, hi = domain
    for _ in range(12):
        x = RNG.uniform(lo, hi, size=(3, 4))
        check_grad(lambda p: scalarize(op(p)), x)


def test_relu_fd_away_from_kink():
    x = RNG.uniform(0.2, 2.0, size=(3, 4)) * RNG.choice([-1.0, 1.0], size=(3, 4))
    check_grad(lambda p: scalarize(ad.relu(p)), x)


@pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
def test_binary_fd_same_shape(op):
    for _ in range(12):
        x = RNG.uniform(0.5, 2.0, size=(2, 5))
        y = RNG.uniform(0.5, 2.0, size=(2, 5))
        check_grad(lambda p: scalarize(op(p, ad.constant(y))), x)
        check_grad(lambda p: scalarize(op(ad.constant(x), p)), y)


@pytest.mark.parametrize("shape_a,shape_b", [
    ((4, 3), (3,)), ((4, 3), (1, 3)), ((4, 1), (1, 3)), ((2, 4, 3), (3,)),
    ((3,), (4, 3)),
])
def test_broadcast_grads(shape_a, shape_b):
    x = RNG.uniform(0.5, 2.0, size=shape_a)
    y = RNG.uniform(0.5, 2.0, size=shape_b)
    check_grad(lambda p: scalarize(ad.mul(p, ad.constant(y))), x)
    check_grad(lambda p: scalarize(ad.mul(ad.constant(x), p)), y)
    check_grad(lambda p: scalarize(ad.add(ad.constant(x), p)), y)
    check_grad(lambda p: scalarize(ad.div(ad.constant(x), p)), y)


def test_pow_const_fd():
    x = RNG.uniform(0.5, 2.0, size=(6,))
    for p_exp in (2.0, 3.0, -1.0, 0.5):
        check_grad(lambda p: scalarize(ad.pow_const(p, p_exp)), x)


def test_matmul_fd():
    a = RNG.normal(size=(4, 3))
    b = RNG.normal(size=(3, 5))
    check_grad(lambda p: scalarize(ad.matmul(p, ad.constant(b))), a)
    check_grad(lambda p: scalarize(ad.matmul(ad.constant(a), p)), b)


def test_matmul_rejects_non_2d():
    with pytest.raises(ValueError):
        ad.matmul(ad.leaf(np.ones(3)), ad.leaf(np.ones((3, 2))))


@pytest.mark.parametrize("axis,keepdims", [
    (None, False), (0, False), (1, False), (-1, True), ((0, 1), False),
])
def test_sum_mean_fd(axis, keepdims):
    x = RNG.normal(size=(3, 4, 2))
    check_grad(lambda p: scalarize(ad.vsum(p, axis=axis, keepdims=keepdims)), x)
    check_grad(lambda p: scalarize(ad.vmean(p, axis=axis, keepdims=keepdims)), x)


def test_cumsum_exclusive_values():
    x = ad.constant(np.array([[1.0, 2.0, 3.0]]))
    out = ad.cumsum_exclusive(x)
    np.testing.assert_allclose(out.value, [[0.0, 1.0, 3.0]])


def test_cumsum_exclusive_fd():
    x = RNG.normal(size=(2, 5))
    check_grad(lambda p: scalarize(ad.cumsum_exclusive(p)), x)


def test_concat_fd():
    x = RNG.normal(size=(3, 2))
    y = RNG.normal(size=(3, 4))
    check_grad(lambda p: scalarize(ad.concat([p, ad.constant(y)], axis=-1)), x)
    check_grad(lambda p: scalarize(ad.concat([ad.constant(x), p], axis=-1)), y)
    check_grad(lambda p: scalarize(ad.concat([ad.constant(x), p], axis=0)),
               RNG.normal(size=(2, 2)))


def test_take_rows_fd_with_repeats():
    x = RNG.normal(size=(4, 3))
    idx = np.array([0, 2, 2, 1, 0, 0])
    check_grad(lambda p: scalarize(ad.take_rows(p, idx)), x)


def test_take_rows_scatter_add():
    x = ad.leaf(np.zeros((3, 2)))
    idx = np.array([1, 1, 1])
    out = ad.vsum(ad.take_rows(x, idx))
    ad.backward(out)
    np.testing.assert_allclose(x.grad, [[0, 0], [3, 3], [0, 0]])


def test_scatter_rows_fd():
    v = RNG.normal(size=(3, 2))
    idx = np.array([4, 0, 2])
    check_grad(lambda p: scalarize(ad.scatter_rows(5, idx, p)), v)


def test_scatter_rows_values():
    v = ad.constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = ad.scatter_rows(3, np.array([2, 0]), v)
    np.testing.assert_allclose(out.value, [[3, 4], [0, 0], [1, 2]])


def test_reshape_getitem_fd():
    x = RNG.normal(size=(4, 6))
    check_grad(lambda p: scalarize(ad.reshape(p, (2, 12))), x)
    check_grad(lambda p: scalarize(ad.getitem(p, (slice(None), slice(1, 4)))), x)
    check_grad(lambda p: scalarize(ad.getitem(p, (slice(0, 2), 3))), x)


def test_clamp_fd_away_from_tie():
    x = RNG.uniform(0.5, 2.0, size=(8,)) * RNG.choice([-1.0, 1.0], size=(8,))
    check_grad(lambda p: scalarize(ad.maximum_const(p, 0.1)), x)
    check_grad(lambda p: scalarize(ad.minimum_const(p, 0.1)), x)


def test_safe_pow_endpoints_exact():
    b = ad.constant(np.array([0.0, 1.0, 0.25]))
    q = ad.constant(np.array(1.0 / 2.4))
    out = ad.safe_pow(b, q)
    assert out.value[0] == 0.0
    assert out.value[1] == 1.0
    assert out.value[2] == pytest.approx(0.25 ** (1 / 2.4))


def test_safe_pow_fd_both_args():
    b = RNG.uniform(0.05, 1.0, size=(6,))
    q = RNG.uniform(0.2, 1.5, size=(6,))
    check_grad(lambda p: scalarize(ad.safe_pow(p, ad.constant(q))), b)
    check_grad(lambda p: scalarize(ad.safe_pow(ad.constant(b), p)), q)


def test_safe_pow_zero_base_gradient_is_zero():
    b = ad.leaf(np.array([0.0, 0.5]))
    q = ad.leaf(np.array(0.5))
    out = ad.vsum(ad.safe_pow(b, q))
    ad.backward(out)
    assert b.grad[0] == 0.0
    assert np.isfinite(b.grad).all()
    assert np.isfinite(q.grad).all()


def test_rot_coefs_match_closed_form():
    s = np.array([1e-12, 1e-9, 1e-7, 1e-4, 0.1, 1.0, 9.0])
    th = np.sqrt(s)
    a = ad.rot_coef_a(ad.constant(s)).value
    b = ad.rot_coef_b(ad.constant(s)).value
    np.testing.assert_allclose(a, np.sinc(th / np.pi), rtol=1e-12)
    want_b = np.where(s > 1e-20, 2.0 * np.sin(th / 2.0) ** 2 / np.maximum(s, 1e-300), 0.5)
    np.testing.assert_allclose(b, want_b, rtol=1e-9)


def test_rot_coefs_continuous_at_series_switch():
    # series branch (just below the cutover) must agree with the closed
    # form evaluated at the same point
    s = 0.999e-8
    th = np.sqrt(s)
    a = ad.rot_coef_a(ad.constant(np.array(s))).value
    b = ad.rot_coef_b(ad.constant(np.array(s))).value
    assert abs(a - np.sin(th) / th) < 1e-14
    # cancellation-free closed form for the comparison
    assert abs(b - 2.0 * np.sin(th / 2.0) ** 2 / s) < 1e-14


def test_rot_coefs_fd():
    s = RNG.uniform(1e-3, 4.0, size=(7,))
    check_grad(lambda p: scalarize(ad.rot_coef_a(p)), s)
    check_grad(lambda p: scalarize(ad.rot_coef_b(p)), s)


def test_stop_gradient_blocks():
    x = ad.leaf(np.array(2.0))
    f = ad.mul(x, ad.stop_gradient(ad.mul(x, x)))
    ad.backward(f)
    assert x.grad == pytest.approx(4.0)  # d/dx of x*const(4)


def test_normalize_last_unit_norm():
    x = ad.constant(RNG.normal(size=(5, 3)))
    n = ad.normalize_last(x)
    np.testing.assert_allclose(np.linalg.norm(n.value, axis=-1), 1.0, atol=1e-6)


def test_normalize_last_fd():
    x = RNG.normal(size=(4, 3))
    x += np.sign(x) * 0.2
    check_grad(lambda p: scalarize(ad.normalize_last(p)), x)


def test_dot_norm_composites_fd():
    a = RNG.normal(size=(4, 3))
    b = RNG.normal(size=(4, 3))
    check_grad(lambda p: scalarize(ad.dot_last(p, ad.constant(b))), a)
    check_grad(lambda p: scalarize(ad.norm_last(p)), a + np.sign(a) * 0.3)


def test_operator_sugar():
    x = ad.leaf(np.array(3.0))
    f = (2.0 * x + 1.0) / (x - 1.0) - (-x)
    ad.backward(f)
    # f = (2x+1)/(x-1) + x; f'(3) = -3/4 + 1
    assert x.grad == pytest.approx(0.25)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=8))
def test_chain_fd_property(vals):
    x = np.asarray(vals, dtype=np.float64)

    def build(p):
        h = ad.softplus(ad.mul(p, ad.constant(0.7)))
        h = ad.add(ad.sigmoid(h), ad.cos(p))
        return ad.vsum(ad.mul(h, h))

    check_grad(build, x, rtol=1e-4, atol=1e-6)


def test_deep_chain_no_recursion_limit():
    x = ad.leaf(np.array(0.5))
    h = x
    for _ in range(3000):
        h = ad.add(ad.mul(h, ad.constant(0.999)), ad.constant(1e-4))
    ad.backward(h)
    assert x.grad == pytest.approx(0.999 ** 3000, rel=1e-9)


def test_diamond_graph_accumulates_once_per_path():
    x = ad.leaf(np.array(2.0))
    a = ad.mul(x, x)
    f = ad.add(a, a)  # 2x^2
    ad.backward(f)
    assert x.grad == pytest.approx(8.0)


def test_fd_oracle_sanity():
    # oracle itself on a known derivative
    g = fd_gradient(lambda x: float(np.sum(x ** 3)), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [3.0, 12.0], rtol=1e-8)
