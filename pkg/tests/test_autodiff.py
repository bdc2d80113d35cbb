"""Every autodiff op is checked against central finite differences."""

import numpy as np
import pytest

from phraseground import autodiff as ad


def numeric_grad(fn, x, eps=1e-6):
    """Central-difference gradient of a scalar fn of one ndarray."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = fn(x)
        flat[i] = orig - eps
        lm = fn(x)
        flat[i] = orig
        gf[i] = (lp - lm) / (2 * eps)
    return g


def tape_grad(build, x):
    t = ad.parameter(x)
    loss = build(t)
    loss.backward()
    return t.grad


CASES = [
    ("add", lambda t: ad.tsum(t + np.array([1.0, 2.0, 3.0])),
     lambda v: float((v + np.array([1.0, 2.0, 3.0])).sum()), np.array([0.3, -1.2, 2.0])),
    ("sub", lambda t: ad.tsum(np.array([1.0, 2.0, 3.0]) - t),
     lambda v: float((np.array([1.0, 2.0, 3.0]) - v).sum()), np.array([0.3, -1.2, 2.0])),
    ("mul", lambda t: ad.tsum(t * t),
     lambda v: float((v * v).sum()), np.array([0.5, -0.7, 1.1])),
    ("div", lambda t: ad.tsum(1.0 / t),
     lambda v: float((1.0 / v).sum()), np.array([0.5, -0.7, 1.1])),
    ("relu", lambda t: ad.tsum(ad.relu(t)),
     lambda v: float(np.maximum(v, 0).sum()), np.array([0.5, -0.7, 1.1])),
    ("sigmoid", lambda t: ad.tsum(ad.sigmoid(t)),
     lambda v: float((1 / (1 + np.exp(-v))).sum()), np.array([0.5, -0.7, 1.1])),
    ("tanh", lambda t: ad.tsum(ad.tanh(t)),
     lambda v: float(np.tanh(v).sum()), np.array([0.5, -0.7, 1.1])),
    ("exp", lambda t: ad.tsum(ad.exp(t)),
     lambda v: float(np.exp(v).sum()), np.array([0.5, -0.7, 1.1])),
    ("log", lambda t: ad.tsum(ad.log(t)),
     lambda v: float(np.log(v).sum()), np.array([0.5, 0.7, 1.1])),
    ("sqrt", lambda t: ad.tsum(ad.sqrt(t)),
     lambda v: float(np.sqrt(v).sum()), np.array([0.5, 0.7, 1.1])),
    ("softplus", lambda t: ad.tsum(ad.softplus(t)),
     lambda v: float(np.logaddexp(0, v).sum()), np.array([0.5, -30.0, 30.0])),
    ("power", lambda t: ad.tsum(ad.power(t, 3)),
     lambda v: float((v ** 3).sum()), np.array([0.5, -0.7, 1.1])),
    ("mean", lambda t: ad.tmean(t),
     lambda v: float(v.mean()), np.array([0.5, -0.7, 1.1])),
    ("smooth_l1", lambda t: ad.tsum(ad.smooth_l1(t)),
     lambda v: float(np.where(np.abs(v) < 1, 0.5 * v * v, np.abs(v) - 0.5).sum()),
     np.array([0.5, -0.7, 2.3, -4.0])),
]


@pytest.mark.parametrize("name,build,fn,x", CASES, ids=[c[0] for c in CASES])
def test_unary_and_binary_ops_match_finite_differences(name, build, fn, x):
    a = tape_grad(build, x)
    n = numeric_grad(fn, x.copy())
    assert np.allclose(a, n, atol=1e-7), f"{name}: {a} vs {n}"


def test_matmul_grads_all_shapes():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((4, 2))
    v = rng.standard_normal(4)
    u = rng.standard_normal(3)

    # 2D @ 2D
    a = tape_grad(lambda t: ad.tsum(ad.matmul(t, B)), A)
    n = numeric_grad(lambda m: float((m @ B).sum()), A.copy())
    assert np.allclose(a, n, atol=1e-7)
    # 2D @ 1D
    a = tape_grad(lambda t: ad.tsum(ad.matmul(A, t)), v)
    n = numeric_grad(lambda m: float((A @ m).sum()), v.copy())
    assert np.allclose(a, n, atol=1e-7)
    # 1D @ 2D
    a = tape_grad(lambda t: ad.tsum(ad.matmul(t, B)), v)
    n = numeric_grad(lambda m: float((m @ B).sum()), v.copy())
    assert np.allclose(a, n, atol=1e-7)
    # 1D @ 1D
    a = tape_grad(lambda t: ad.matmul(t, u), np.array([1.0, -2.0, 0.5]))
    assert np.allclose(a, u)


def test_matmul_rejects_3d():
    with pytest.raises(ValueError):
        ad.matmul(ad.as_tensor(np.zeros((2, 2, 2))), ad.as_tensor(np.zeros(2)))


def test_concat_and_getitem_route_gradients():
    x = ad.parameter(np.array([1.0, 2.0]))
    y = ad.parameter(np.array([3.0, 4.0, 5.0]))
    z = ad.concat([x, y])
    loss = ad.tsum(z[1:4] * np.array([10.0, 20.0, 30.0]))
    loss.backward()
    assert np.allclose(x.grad, [0.0, 10.0])
    assert np.allclose(y.grad, [20.0, 30.0, 0.0])


def test_getitem_repeated_indices_accumulate():
    x = ad.parameter(np.array([1.0, 2.0, 3.0]))
    picked = x[np.array([0, 0, 2])]
    ad.tsum(picked).backward()
    assert np.allclose(x.grad, [2.0, 0.0, 1.0])


def test_stack_gradient():
    xs = [ad.parameter(float(i)) for i in range(4)]
    s = ad.stack(xs)
    ad.tsum(s * np.array([1.0, 2.0, 3.0, 4.0])).backward()
    assert [float(x.grad) for x in xs] == [1.0, 2.0, 3.0, 4.0]


def test_tmax_routes_to_first_argmax():
    x = ad.parameter(np.array([1.0, 5.0, 5.0, 2.0]))
    ad.tmax(x).backward()
    assert np.allclose(x.grad, [0.0, 1.0, 0.0, 0.0])


def test_log_softmax_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.standard_normal(6)
    w = rng.standard_normal(6)
    a = tape_grad(lambda t: ad.tsum(ad.log_softmax(t) * w), x)

    def fn(v):
        z = v - v.max()
        ls = z - np.log(np.exp(z).sum())
        return float((ls * w).sum())
    n = numeric_grad(fn, x.copy())
    assert np.allclose(a, n, atol=1e-7)


def test_log_softmax_2d_rows():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((3, 5))
    out = ad.log_softmax(ad.as_tensor(x), axis=1)
    assert np.allclose(np.exp(out.value).sum(axis=1), 1.0)


def test_transpose_gradient():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    w = np.arange(6.0).reshape(3, 2)
    ad.tsum(ad.transpose(x) * w).backward()
    assert np.allclose(x.grad, w.T)


def test_broadcast_unsums_matrix_plus_row():
    x = ad.parameter(np.ones((4, 3)))
    b = ad.parameter(np.array([1.0, 2.0, 3.0]))
    ad.tsum(x + b).backward()
    assert np.allclose(x.grad, np.ones((4, 3)))
    assert np.allclose(b.grad, [4.0, 4.0, 4.0])


def test_no_graph_without_requires_grad():
    x = ad.as_tensor(np.array([1.0, 2.0]))
    y = x + x
    assert not y.requires_grad and y._parents == ()


def test_backward_rejects_vector():
    x = ad.parameter(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        (x + x).backward()


def test_grad_accumulates_through_shared_subexpression():
    x = ad.parameter(2.0)
    y = x * x          # used twice below
    loss = y + y
    loss.backward()
    assert float(x.grad) == pytest.approx(8.0)
