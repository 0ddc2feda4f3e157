import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from caw.errors import ContractError, DimensionError, DomainError, GraphConsumedError, NumericError
from caw.tensor import (Tensor, backward, clamp_min, cosine_similarity, exp, finite_diff_grad, gather_rows,
                        kl_divergence_rows, log, log_softmax_rows, matmul, max_rows, mean, row_norm,
                        softmax_rows, sqrt, tanh, tsum)

mpmath.mp.dps = 50


def mp_softmax(row):
    m = max(row)
    e = [mpmath.exp(mpmath.mpf(float(v)) - mpmath.mpf(float(m))) for v in row]
    s = mpmath.fsum(e)
    return [float(v / s) for v in e]


def mp_kl(p, q):
    return float(mpmath.fsum(mpmath.mpf(float(a)) * (mpmath.log(mpmath.mpf(float(a))) - mpmath.log(mpmath.mpf(float(b))))
                             for a, b in zip(p, q) if a > 0))


def grad_of(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*ts))
    return [t.grad for t in ts]


# -- softmax --------------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_softmax_ln2():
    np.testing.assert_allclose(softmax_rows(Tensor([[math.log(2), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)


def test_softmax_extreme_no_overflow():
    with np.errstate(over="raise"):
        p = softmax_rows(Tensor([[1000.0, 0.0]])).data
    np.testing.assert_allclose(p[0], mp_softmax([1000.0, 0.0]), rtol=1e-12, atol=1e-300)
    assert p[0, 0] == pytest.approx(1.0)


def test_softmax_empty_is_dimension_error():
    with pytest.raises(DimensionError):
        softmax_rows(Tensor(np.zeros((0, 3))))
    with pytest.raises(DimensionError):
        softmax_rows(Tensor(np.zeros((2, 0))))


@given(arrays(np.float64, (3, 4), elements=st.floats(-500, 500)))
def test_softmax_matches_mpmath(z):
    p = softmax_rows(Tensor(z)).data
    for row, prow in zip(z, p):
        np.testing.assert_allclose(prow, mp_softmax(row), rtol=1e-10, atol=1e-300)


@given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)))
def test_log_softmax_consistent(z):
    np.testing.assert_allclose(np.exp(log_softmax_rows(Tensor(z)).data), softmax_rows(Tensor(z)).data,
                               rtol=1e-12, atol=1e-300)


# -- KL -------------------------------------------------------------------------


def test_kl_identical_is_zero():
    p = Tensor([[0.5, 0.5]])
    assert kl_divergence_rows(p, p).data[0] == 0.0


def test_kl_closed_form_ln2():
    assert kl_divergence_rows(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).data[0] == pytest.approx(math.log(2), abs=1e-12)


def test_kl_matches_term_by_term_oracle():
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(6), size=20)
    q = rng.dirichlet(np.ones(6), size=20)
    kl = kl_divergence_rows(Tensor(p), Tensor(q)).data
    for i in range(20):
        assert kl[i] == pytest.approx(mp_kl(p[i], q[i]), rel=1e-12)


def test_kl_shape_and_domain_errors():
    with pytest.raises(DimensionError):
        kl_divergence_rows(Tensor([[0.5, 0.5]]), Tensor([[1.0, 0.0, 0.0]]))
    with pytest.raises(DomainError):
        kl_divergence_rows(Tensor([[0.7, 0.7]]), Tensor([[0.5, 0.5]]))


@given(arrays(np.float64, (4, 3), elements=st.floats(-1000, 1000)),
       arrays(np.float64, (4, 3), elements=st.floats(-1000, 1000)))
def test_kl_non_negative_on_extreme_logits(a, b):
    kl = kl_divergence_rows(softmax_rows(Tensor(a)), softmax_rows(Tensor(b))).data
    assert np.all(kl >= -1e-9)
    assert np.all(np.isfinite(kl))


# -- backward -------------------------------------------------------------------


@pytest.mark.parametrize("shape", [(3,), (2, 3), (2, 1, 4)])
def test_grad_of_sum_is_ones(shape):
    (g,) = grad_of(lambda x: x.sum(), np.arange(np.prod(shape), dtype=float).reshape(shape))
    np.testing.assert_array_equal(g, np.ones(shape))


def test_grad_of_sum_of_squares():
    (g,) = grad_of(lambda x: (x * x).sum(), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    root = (x * x).sum()
    backward(root)
    with pytest.raises(GraphConsumedError):
        backward(root)


def test_backward_needs_scalar_and_tracked_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)
    with pytest.raises(ContractError):
        backward(Tensor([1.0, 2.0]).sum())


def test_shared_subexpression_accumulates():
    (g,) = grad_of(lambda x: (x * x + x).sum() * 2.0, np.array([0.5, -1.0]))
    np.testing.assert_allclose(g, 2 * (2 * np.array([0.5, -1.0]) + 1))


def test_log_domain_error():
    with pytest.raises(DomainError):
        log(Tensor([1.0, 0.0]))


OPS = {
    "add_broadcast": (lambda a, b: (a + b).sum(), [(3, 4), (4,)]),
    "mul_broadcast": (lambda a, b: (a * b * b).sum(), [(3, 4), (1, 4)]),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [(2, 3), (2, 3)]),
    "sub_neg": (lambda a, b: (-(a - b) * a).sum(), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: tanh(matmul(a, b)).sum(), [(3, 4), (4, 2)]),
    "exp_log": (lambda a, b: log(exp(a) + exp(b)).sum(), [(2, 3), (2, 3)]),
    "sqrt": (lambda a, b: sqrt(a * a + b * b + 0.1).sum(), [(2, 3), (2, 3)]),
    "mean_axis": (lambda a, b: (mean(a * b, axis=1) ** 2).sum(), [(3, 4), (3, 4)]),
    "tsum_keepdims": (lambda a, b: (tsum(a, axis=0, keepdims=True) * b).sum(), [(3, 4), (3, 4)]),
    "transpose_reshape": (lambda a, b: (matmul(a, b.T).reshape(-1) ** 2).sum(), [(2, 3), (4, 3)]),
    "softmax": (lambda a, b: (softmax_rows(a) * b).sum(), [(3, 4), (3, 4)]),
    "log_softmax": (lambda a, b: (log_softmax_rows(a) * b).sum(), [(3, 4), (3, 4)]),
    "row_norm": (lambda a, b: (row_norm(a) * row_norm(b)).sum(), [(3, 4), (3, 4)]),
    "cosine": (lambda a, b: (cosine_similarity(a, b) ** 2).sum(), [(3, 4), (2, 4)]),
    "kl": (lambda a, b: kl_divergence_rows(softmax_rows(a), softmax_rows(b)).sum(), [(3, 4), (3, 4)]),
    "gather_max": (lambda a, b: (gather_rows(a, [0, 2, 1]) + max_rows(b)).sum(), [(3, 4), (3, 4)]),
    "clamp_min": (lambda a, b: (clamp_min(a, 0.3) * b).sum(), [(3, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(5))
def test_op_gradients_match_finite_differences(name, seed):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.05, 1.0, size=s) for s in shapes]
    grads = grad_of(fn, *xs)
    for i, x in enumerate(xs):
        def f(t, i=i):
            args = [Tensor(a) for a in xs]
            args[i] = t
            return fn(*args)
        num = finite_diff_grad(f, x).data
        np.testing.assert_allclose(grads[i], num, rtol=1e-6, atol=1e-7)


def test_row_norm_zero_row_gradient_is_zero():
    (g,) = grad_of(lambda x: row_norm(x).sum(), np.array([[0.0, 0.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(g[0], [0.0, 0.0])
    np.testing.assert_allclose(g[1], [0.6, 0.8])


# -- finite differences ---------------------------------------------------------


def test_finite_diff_sum_of_squares():
    g = finite_diff_grad(lambda t: (t * t).sum(), np.array([3.0]))
    assert abs(g.data[0] - 6.0) < 1e-6


def test_finite_diff_constant_is_zero():
    np.testing.assert_array_equal(finite_diff_grad(lambda t: 7.0, np.ones((2, 2))).data, np.zeros((2, 2)))


def test_finite_diff_non_finite_raises():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda t: float("nan"), np.ones(2))


def test_finite_diff_of_confidence_loss_agrees_with_backward():
    from caw.losses import confidence_aware_loss, prediction_distributions
    from conftest import make_batch, make_model

    model = make_model(seed=4, drift=0.3)
    x, y = make_batch(4, 5, 4, 3)
    x_adv = np.clip(x + 0.05, 0, 1)

    def loss():
        p_adv, p_clean = prediction_distributions(model, x, x_adv)
        return confidence_aware_loss(p_adv, p_clean, y, detach_weight=False)

    w = model.tuned.parameters()[0]
    backward(loss())
    analytic = w.grad.copy()
    orig = w.data

    def f(t):
        w.data = t.data
        return loss()

    numeric = finite_diff_grad(f, orig).data
    w.data = orig
    err = np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-8)
    assert err < 1e-4


@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)))
def test_item_and_detach(x):
    t = Tensor(x, requires_grad=True)
    d = t.detach()
    assert not d.requires_grad
    np.testing.assert_array_equal(d.data, x)
    assert t.sum().item() == pytest.approx(float(x.sum()))
