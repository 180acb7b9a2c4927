import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eqsolve import autodiff as ad
from eqsolve.autodiff import Tape, Tensor
from eqsolve.errors import NonFiniteError, ShapeError


def central_diff(fn, x, h=1e-5):
    """Gradient of a scalar numpy function by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = fn(x)
        x[idx] = old - h
        down = fn(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300)


# -- elementwise ----------------------------------------------------------------


def test_sin_of_zeros_is_zeros():
    out = ad.sin(Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros(4))


def test_relu_definition():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_add_zero_is_bitwise_identity():
    x = Tensor(np.random.default_rng(0).standard_normal(7))
    assert np.array_equal((x + 0).data, x.data)
    assert np.array_equal(ad.add(x, Tensor(np.zeros(7))).data, x.data)


def test_elementwise_dispatch():
    a = Tensor([1.0, -2.0])
    b = Tensor([3.0, 4.0])
    np.testing.assert_array_equal(ad.elementwise("add", a, b).data, [4.0, 2.0])
    np.testing.assert_array_equal(ad.elementwise("sub", a, b).data, [-2.0, -6.0])
    np.testing.assert_array_equal(ad.elementwise("mul", a, b).data, [3.0, -8.0])
    np.testing.assert_array_equal(ad.elementwise("relu", a).data, [1.0, 0.0])
    np.testing.assert_array_equal(ad.elementwise("scale", a, 2.0).data, [2.0, -4.0])
    np.testing.assert_allclose(ad.elementwise("tanh", a).data, np.tanh([1.0, -2.0]))
    np.testing.assert_allclose(ad.elementwise("sin", a).data, np.sin([1.0, -2.0]))
    with pytest.raises(ValueError):
        ad.elementwise("frobnicate", a)
    with pytest.raises(ValueError):
        ad.elementwise("add", a)


def test_broadcast_only_scalar_or_equal_shape():
    a = Tensor(np.ones((2, 3)))
    (a + 1.0)
    (a * Tensor(2.0))
    with pytest.raises(ShapeError):
        a + Tensor(np.ones(3))
    with pytest.raises(ShapeError):
        a * Tensor(np.ones((3, 2)))
    np.testing.assert_array_equal(ad.broadcast_to(Tensor(np.arange(3.0)), (2, 3)).data,
                                  np.tile(np.arange(3.0), (2, 1)))


def test_non_finite_input_is_reported():
    with pytest.raises(NonFiniteError):
        ad.tanh(Tensor([0.0, np.nan]))
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.inf]) + 1.0
    with pytest.raises(NonFiniteError):
        ad.matmul(Tensor(np.eye(2)), Tensor([np.inf, 0.0]))


def test_float32_is_opt_in():
    assert Tensor([1, 2]).dtype == np.float64
    assert Tensor(np.ones(2, dtype=np.float32)).dtype == np.float32
    assert Tensor([1.0], dtype=np.float32).dtype == np.float32


# -- matmul ---------------------------------------------------------------------


def triple_loop(A, B):
    m, k = A.shape
    n = B.shape[1]
    C = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += A[i, p] * B[p, j]
            C[i, j] = s
    return C


def test_matmul_identity_and_annihilator():
    B = np.random.default_rng(1).standard_normal((3, 5))
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(B)).data, B)
    np.testing.assert_array_equal((Tensor(B.T) @ Tensor(np.zeros((3, 2)))).data, np.zeros((5, 2)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(2)
    A, B = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    np.testing.assert_allclose((Tensor(A) @ Tensor(B)).data, triple_loop(A, B), atol=1e-12, rtol=0)


def test_matmul_dim_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


# -- vjp / grad -----------------------------------------------------------------


def test_vjp_linear_map_is_transpose():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((5, 4))
    z, v = rng.standard_normal(4), rng.standard_normal(5)
    out = ad.vjp(lambda t: Tensor(W) @ t, z, v)
    np.testing.assert_allclose(out.data, W.T @ v, rtol=0, atol=1e-14)


def test_vjp_sin_at_zero():
    out = ad.vjp(ad.sin, np.zeros(6), np.ones(6))
    np.testing.assert_array_equal(out.data, np.ones(6))


def test_vjp_two_layer_tanh_against_directional_fd():
    rng = np.random.default_rng(4)
    W1, W2 = rng.standard_normal((6, 5)), rng.standard_normal((3, 6))
    z, v = rng.uniform(-1, 1, 5), rng.standard_normal(3)

    def f_np(x):
        return np.tanh(W2 @ np.tanh(W1 @ x))

    def f(t):
        return ad.tanh(Tensor(W2) @ ad.tanh(Tensor(W1) @ t))

    got = ad.vjp(f, z, v).data
    ref = central_diff(lambda x: v @ f_np(x), z)
    assert rel_err(got, ref) < 1e-6


def test_vjp_does_not_mutate_and_checks_shapes():
    z = Tensor(np.arange(3.0))
    before = z.data.copy()
    ad.vjp(lambda t: t * t, z, np.ones(3))
    np.testing.assert_array_equal(z.data, before)
    with pytest.raises(ShapeError):
        ad.vjp(lambda t: t * t, z, np.ones(4))
    with pytest.raises(TypeError):
        ad.vjp(lambda t: t.data * 2, z, np.ones(3))


def test_grad_of_sum_is_ones():
    z = Tensor(np.arange(5.0), requires_grad=True)
    (g,) = ad.grad(z.sum(), [z])
    np.testing.assert_array_equal(g.data, np.ones(5))


def test_grad_of_half_square_norm_is_identity():
    z = Tensor(np.random.default_rng(5).standard_normal(6), requires_grad=True)
    (g,) = ad.grad(ad.scale((z * z).sum(), 0.5), [z])
    np.testing.assert_allclose(g.data, z.data, rtol=0, atol=0)


def test_grad_unconnected_param_gets_zeros_and_nonscalar_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    ga, gb = ad.grad((a * 2.0).sum(), [a, b])
    np.testing.assert_array_equal(gb.data, np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        ad.grad(a * 2.0, [a])


def test_random_mlp_grad_matches_fd():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 3))
    W1, b1, W2 = rng.standard_normal((5, 3)), rng.standard_normal(5), rng.standard_normal((2, 5))
    y = rng.standard_normal((4, 2))

    def loss_np(W1, b1, W2):
        h = np.tanh(x @ W1.T + b1)
        return np.mean((h @ W2.T - y) ** 2)

    P = [Tensor(W1, requires_grad=True), Tensor(b1, requires_grad=True), Tensor(W2, requires_grad=True)]
    h = ad.tanh(Tensor(x) @ P[0].T + ad.broadcast_to(P[1], (4, 5)))
    d = h @ P[2].T - Tensor(y)
    grads = ad.grad((d * d).mean(), P)
    refs = [
        central_diff(lambda w: loss_np(w, b1, W2), W1),
        central_diff(lambda b: loss_np(W1, b, W2), b1),
        central_diff(lambda w: loss_np(W1, b1, w), W2),
    ]
    for g, r in zip(grads, refs):
        assert rel_err(g.data, r) < 1e-6


UNARY = {
    "tanh": (ad.tanh, np.tanh),
    "sin": (ad.sin, np.sin),
    "cos": (ad.cos, np.cos),
    "exp": (ad.exp, np.exp),
    "relu": (ad.relu, lambda x: np.maximum(x, 0.0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_vjp_matches_fd(name):
    op, ref = UNARY[name]
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, 8)
    x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
    v = rng.standard_normal(8)
    got = ad.vjp(op, x, v).data
    assert rel_err(got, central_diff(lambda t: v @ ref(t), x)) < 1e-6


BINARY = {
    "add": (ad.add, np.add),
    "sub": (ad.sub, np.subtract),
    "mul": (ad.mul, np.multiply),
    "div": (ad.div, np.divide),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_vjp_matches_fd(name):
    op, ref = BINARY[name]
    rng = np.random.default_rng(8)
    a, b = rng.uniform(-1, 1, 6), rng.uniform(0.5, 1.0, 6)
    v = rng.standard_normal(6)
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    ga, gb = ad.backward([op(ta, tb)], [v], [ta, tb])
    assert rel_err(ga.data, central_diff(lambda t: v @ ref(t, b), a)) < 1e-6
    assert rel_err(gb.data, central_diff(lambda t: v @ ref(a, t), b)) < 1e-6


def test_shape_ops_vjp_match_fd():
    rng = np.random.default_rng(9)
    x = rng.uniform(-1, 1, (3, 4))
    t = Tensor(x, requires_grad=True)
    cases = [
        (lambda u: (u.T @ Tensor(np.ones((3, 2)))).sum(), lambda u: (u.T @ np.ones((3, 2))).sum()),
        (lambda u: (u.reshape(12) * Tensor(np.arange(12.0))).sum(), lambda u: u.reshape(12) @ np.arange(12.0)),
        (lambda u: (u[1:, ::2] * u[1:, ::2]).sum(), lambda u: (u[1:, ::2] ** 2).sum()),
        (lambda u: (u.sum(axis=0) * Tensor([1.0, 2.0, 3.0, 4.0])).sum(), lambda u: u.sum(axis=0) @ [1.0, 2.0, 3.0, 4.0]),
        (lambda u: ad.log_softmax(u, axis=1)[0, 2], lambda u: (u[0] - np.log(np.exp(u[0]).sum()))[2]),
        (lambda u: (ad.concat([u, u * 2.0], axis=0) ** 2).sum(), lambda u: 5 * (u**2).sum()),
        (lambda u: ad.sqrt(u * u + 1.0).sum(), lambda u: np.sqrt(u * u + 1.0).sum()),
    ]
    for fn, ref in cases:
        (g,) = ad.grad(fn(t), [t])
        assert rel_err(g.data, central_diff(ref, x)) < 1e-6


def test_minimum_tie_sends_gradient_to_second_argument():
    a = Tensor([2.0, 1.0, 3.0], requires_grad=True)
    b = Tensor([1.0, 1.0, 5.0], requires_grad=True)
    ga, gb = ad.backward([ad.minimum(a, b)], [np.ones(3)], [a, b])
    np.testing.assert_array_equal(ga.data, [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(gb.data, [1.0, 1.0, 0.0])


def test_double_backward_for_jacobian_penalty():
    # d/dw of ||d(w*sin z)/dz||^2 at fixed z = 2 w sum(cos(z)^2)
    z = Tensor(np.array([0.3, -0.7]), requires_grad=True)
    w = Tensor(1.5, requires_grad=True)
    fz = w * ad.sin(z)
    (gz,) = ad.backward([fz], [np.ones(2)], [z], create_graph=True)
    (gw,) = ad.grad((gz * gz).sum(), [w])
    np.testing.assert_allclose(gw.data, 2 * 1.5 * np.sum(np.cos(z.data) ** 2), rtol=1e-14)


def test_tape_records_in_topological_order():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        b = a * 2.0
        c = ad.tanh(b) + b
        c.sum()
    ids = [n.id for n in tape.nodes]
    assert ids == sorted(ids)
    pos = {n.id: i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node.parents:
            if p.node is not None:
                assert pos[p.node.id] < pos[node.id]
    assert tape.ops() == ["mul", "tanh", "add", "sum"]


def test_backward_visits_each_node_once():
    calls = []
    a = Tensor(np.ones(2), requires_grad=True)

    def vjp_fn(g):
        calls.append(1)
        return (g,)

    b = ad.custom_op(a.data, [a], vjp_fn)
    out = (b * b + b).sum()
    ad.grad(out, [a])
    assert len(calls) == 1


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad(), Tape() as tape:
        b = a * 3.0
    assert len(tape) == 0 and b.is_leaf and not b.requires_grad


def test_replaying_a_graph_is_bitwise_deterministic():
    rng = np.random.default_rng(10)
    W = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    x = Tensor(rng.standard_normal(4))
    loss = (ad.tanh(W @ ad.tanh(W @ x)) ** 2).sum()
    (g1,) = ad.grad(loss, [W])
    (g2,) = ad.grad(loss, [W])
    assert np.array_equal(g1.data, g2.data)


finite_vec = arrays(np.float64, st.integers(1, 6), elements=st.floats(-1, 1))


@settings(max_examples=40, deadline=None)
@given(finite_vec, st.data())
def test_grad_is_linear_in_the_loss(x, data):
    v1 = data.draw(arrays(np.float64, x.shape, elements=st.floats(-1, 1)))
    v2 = data.draw(arrays(np.float64, x.shape, elements=st.floats(-1, 1)))
    t = Tensor(x, requires_grad=True)
    l1 = (ad.tanh(t) * Tensor(v1)).sum()
    l2 = (ad.sin(t) * Tensor(v2)).sum()
    (g_sum,) = ad.grad(l1 + l2, [t])
    (g1,) = ad.grad(l1, [t])
    (g2,) = ad.grad(l2, [t])
    assert np.array_equal(g_sum.data, g1.data + g2.data)


@settings(max_examples=40, deadline=None)
@given(finite_vec)
def test_tanh_vjp_matches_fd_property(x):
    v = np.linspace(-1, 1, x.size)
    got = ad.vjp(ad.tanh, x, v).data
    ref = central_diff(lambda t: v @ np.tanh(t), x)
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-9)
