import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from promptreloc import autodiff as ad
from promptreloc.autodiff import ContractError, SGD, SgdConfig, StaleTapeError, Tensor, sgd_step


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check_primitive(build, x, rtol=1e-4, atol=1e-7):
    t = Tensor(x.copy(), requires_grad=True)
    grads = ad.backward(build(t))
    with ad.no_grad():
        num = fd_grad(lambda v: build(Tensor(v)).item(), x)
    np.testing.assert_allclose(grads[t], num, rtol=rtol, atol=atol)


def test_forward_scalar_constant_and_dot():
    assert ad.forward_scalar(ad.constant([3.0])) == 3.0
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    assert ad.forward_scalar((a * b).sum()) == 11.0


def test_forward_scalar_rejects_vectors():
    with pytest.raises(ContractError):
        ad.forward_scalar(Tensor([1.0, 2.0]))


def test_two_layer_mlp_matches_straight_line():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 4))
    W1, b1, W2 = rng.standard_normal((4, 6)), rng.standard_normal(6), rng.standard_normal((6, 1))
    out = ((Tensor(x) @ Tensor(W1) + Tensor(b1)).tanh() @ Tensor(W2)).mean()
    ref = float(np.mean(np.tanh(x @ W1 + b1) @ W2))
    assert ad.forward_scalar(out) == pytest.approx(ref, abs=1e-15)


def test_product_gradient():
    x, y = Tensor(2.0, requires_grad=True), Tensor(3.0, requires_grad=True)
    g = ad.backward(x * y)
    assert g[x] == 3.0 and g[y] == 2.0


def test_sum_of_softmax_has_zero_gradient():
    v = Tensor(np.random.default_rng(1).standard_normal(7), requires_grad=True)
    g = ad.backward(ad.softmax(v).sum())
    np.testing.assert_allclose(g[v], 0.0, atol=1e-15)


def test_second_backward_is_stale():
    x = Tensor(np.ones(3), requires_grad=True)
    root = (x * x).sum()
    ad.backward(root)
    with pytest.raises(StaleTapeError):
        ad.backward(root)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_leaves_without_requires_grad_get_nothing():
    x, c = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2))
    g = ad.backward((x * c).sum())
    assert c not in g and c.grad is None


def test_tape_order_is_reverse_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    z = (y + x).sum()
    tape = ad.Tape(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    assert pos[id(z)] < pos[id(y)] < pos[id(x)]


PRIMITIVES = {
    "matmul": lambda t: (t @ Tensor(np.arange(12.0).reshape(3, 4) / 10)).sum(),
    "transpose": lambda t: (t.T * Tensor(np.arange(6.0).reshape(3, 2))).sum(),
    "reshape": lambda t: (t.reshape(3, 2) * Tensor(np.arange(6.0).reshape(3, 2))).sum(),
    "getitem": lambda t: (t[1:, ::2] * t[1:, ::2]).sum(),
    "concat": lambda t: (ad.concat([t, t * t], axis=0) * Tensor(np.arange(12.0).reshape(4, 3))).sum(),
    "take": lambda t: ad.take(t, [1, 1, 0], axis=0).exp().sum(),
    "softmax": lambda t: (ad.softmax(t, axis=-1) * Tensor(np.arange(6.0).reshape(2, 3))).sum(),
    "log_softmax": lambda t: (ad.log_softmax(t, axis=0) * Tensor(np.arange(6.0).reshape(2, 3))).sum(),
    "layer_norm": lambda t: (ad.layer_norm(t) * Tensor(np.arange(6.0).reshape(2, 3))).sum(),
    "gelu": lambda t: ad.gelu(t).sum(),
    "tanh": lambda t: t.tanh().mean(),
    "div": lambda t: ((t * t) / 3.0).sum(),
    "log_clip": lambda t: (t * t).clip(1e-3, 10.0).log().sum(),
    "mean_axis": lambda t: (t.mean(axis=1) * Tensor([1.0, -2.0])).sum(),
    "cross_entropy": lambda t: ad.cross_entropy(t, np.array([2, 0])),
    "minimum": lambda t: ad.minimum(t, t * 0.5 + 0.3).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 32)
    x = rng.standard_normal((2, 3))
    if name == "minimum":
        x = x + 0.05 * np.sign(x - (0.5 * x + 0.3))   # keep away from the kink
    check_primitive(PRIMITIVES[name], x)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       st.floats(-2, 2), st.floats(-2, 2))
def test_backward_is_linear(x, a, b):
    W = np.linspace(-1, 1, 12).reshape(4, 3)

    def losses(t):
        return (t @ Tensor(W)).tanh().sum(), ad.softmax(t, axis=-1).log().mean()

    t1 = Tensor(x, requires_grad=True)
    l1, l2 = losses(t1)
    g = ad.backward(l1 * a + l2 * b)[t1]
    t2 = Tensor(x, requires_grad=True)
    g1 = ad.backward(losses(t2)[0])[t2]
    t3 = Tensor(x, requires_grad=True)
    g2 = ad.backward(losses(t3)[1])[t3]
    np.testing.assert_allclose(g, a * g1 + b * g2, rtol=1e-10, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-5, 5)))
def test_softmax_rows_are_distributions(x):
    p = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_forward_and_gradient_are_deterministic():
    x = np.random.default_rng(3).standard_normal((4, 4))
    out = []
    for _ in range(2):
        t = Tensor(x, requires_grad=True)
        root = ad.layer_norm(t @ t).gelu().sum()
        out.append((root.data.tobytes(), ad.backward(root)[t].tobytes()))
    assert out[0] == out[1]


def test_sgd_single_step():
    p = Tensor([1.0], requires_grad=True)
    sgd_step([p], {p: np.array([0.5])}, SgdConfig(0.1))
    assert p.data[0] == pytest.approx(0.95)


def test_sgd_zero_gradient_is_noop():
    p = Tensor([1.0, -2.0], requires_grad=True)
    SGD([p], SgdConfig(0.1, 0.9)).step({p: np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_momentum_two_steps_hand_unrolled():
    # buf1 = g, p1 = p0 - lr (g + wd p0); buf2 = m g + g, p2 = p1 - lr (buf2 + wd p1)
    lr, m, wd, g, p0 = 0.1, 0.9, 0.01, 0.5, 2.0
    p1 = p0 - lr * (g + wd * p0)
    p2 = p1 - lr * (m * g + g + wd * p1)
    p = Tensor([p0], requires_grad=True)
    opt = SGD([p], SgdConfig(lr, m, wd))
    opt.step({p: np.array([g])})
    opt.step({p: np.array([g])})
    assert p.data[0] == pytest.approx(p2, abs=1e-15)
    q = Tensor([p0], requires_grad=True)
    state = sgd_step([q], {q: np.array([g])}, SgdConfig(lr, m, wd))
    sgd_step([q], {q: np.array([g])}, SgdConfig(lr, m, wd), state)
    assert q.data[0] == pytest.approx(p2, abs=1e-15)


def test_sgd_shape_mismatch():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        SGD([p], SgdConfig(0.1)).step({p: np.zeros(3)})


@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(learning_rate=0.1, momentum=1.0),
                                dict(learning_rate=0.1, weight_decay=-1.0)])
def test_sgd_config_contract(kw):
    with pytest.raises(ContractError):
        SgdConfig(**kw)


def test_reset_rows_clears_momentum_of_selected_rows_only():
    p = Tensor(np.zeros((3, 2)), requires_grad=True)
    opt = SGD([p], SgdConfig(0.1, 0.9))
    opt.step({p: np.ones((3, 2))})
    opt.reset_rows(p, [1])
    np.testing.assert_array_equal(opt.buffers[0], [[1, 1], [0, 0], [1, 1]])


def test_adam_first_step_moves_by_lr():
    p = Tensor([1.0, -1.0], requires_grad=True)
    p.grad = np.array([3.0, -0.01])
    ad.Adam([p], lr=0.01).step()
    np.testing.assert_allclose(p.data, [0.99, -0.99], rtol=1e-6)
