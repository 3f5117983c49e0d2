import numpy as np
import pytest

from skelzsl import autodiff as ad


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy(); xp[idx] += eps
        xm = x.copy(); xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def check_unary(op, x):
    def f(xv):
        return float(ad.vsum(op(ad.Var(xv))).value)

    v = ad.Var(x)
    out = ad.vsum(op(v))
    ad.backward(out)
    num = numeric_grad(f, x)
    np.testing.assert_allclose(v.grad, num, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("op", [ad.exp, ad.log, ad.sqrt, ad.softplus,
                                lambda v: ad.softmax(v, axis=-1),
                                lambda v: ad.logsumexp(v, axis=-1),
                                lambda v: ad.l2_normalize(v, axis=-1)])
def test_unary_ops_match_finite_differences(op):
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 2.0, size=(3, 4))
    check_unary(op, x)


def test_relu_gradient_off_kink():
    x = np.array([[-1.0, 0.5, 2.0], [0.25, -0.75, 1.5]])
    check_unary(ad.relu, x)


def test_matmul_and_broadcast_grads():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    c = rng.normal(size=(2,))

    def f_a(av):
        out = ad.add(ad.matmul(ad.Var(av), ad.lift(b)), ad.lift(c))
        return float(ad.vsum(ad.mul(out, out)).value)

    va, vb, vc = ad.Var(a), ad.Var(b), ad.Var(c)
    out = ad.add(ad.matmul(va, vb), vc)
    loss = ad.vsum(ad.mul(out, out))
    ad.backward(loss)
    np.testing.assert_allclose(va.grad, numeric_grad(f_a, a), rtol=1e-6, atol=1e-8)
    # bias broadcast across rows: gradient sums over the broadcast axis
    assert vc.grad.shape == (2,)

    def f_c(cv):
        out = ad.add(ad.matmul(ad.lift(a), ad.lift(b)), ad.Var(cv))
        return float(ad.vsum(ad.mul(out, out)).value)

    np.testing.assert_allclose(vc.grad, numeric_grad(f_c, c), rtol=1e-6, atol=1e-8)


def test_index_and_diag_grads():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 4))

    def f(xv):
        v = ad.Var(xv)
        return float(ad.vsum(ad.add(ad.take_diag(v), ad.index(v, 2))).value)

    v = ad.Var(x)
    out = ad.vsum(ad.add(ad.take_diag(v), ad.index(v, 2)))
    ad.backward(out)
    np.testing.assert_allclose(v.grad, numeric_grad(f, x), rtol=1e-6, atol=1e-9)


def test_vstack_routes_gradients_to_parents():
    a, b = ad.Var(np.array([1.0, 2.0])), ad.Var(np.array([3.0, 4.0]))
    out = ad.vsum(ad.mul(ad.vstack([a, b]), np.array([[1.0, 2.0], [3.0, 4.0]])))
    ad.backward(out)
    np.testing.assert_allclose(a.grad, [1.0, 2.0])
    np.testing.assert_allclose(b.grad, [3.0, 4.0])


def test_grad_accumulates_over_shared_subexpression():
    x = ad.Var(np.array(2.0))
    y = ad.mul(x, x)         # x^2
    z = ad.add(y, ad.mul(x, 3.0))
    ad.backward(z)
    assert float(x.grad) == pytest.approx(2 * 2.0 + 3.0)


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.Var(np.zeros(3)))


def test_softmax_rows_simplex():
    rng = np.random.default_rng(3)
    x = rng.normal(scale=10.0, size=(5, 7))
    s = ad.softmax(ad.Var(x), axis=-1).value
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-12)
