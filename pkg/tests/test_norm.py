import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqsolve import autodiff as ad
from eqsolve.autodiff import Tensor
from eqsolve.nn import Module, param
from eqsolve.norm import (
    NormState,
    apply_norm,
    clipped,
    effective_weight,
    norm_states,
    power_iteration,
    remove_norm,
    reset_norm,
    spectral_norm_factor,
    spectral_sigma,
    weight_norm_factor,
)
from eqsolve.solvers import SolverConfig, solve
from eqsolve.zoo import LinearDeq


class Two(Module):
    def __init__(self, rng):
        self.W = param(rng.standard_normal((5, 5)))
        self.K = param(rng.standard_normal((3, 2, 2)))
        self.b = param(rng.standard_normal(5))

    def __call__(self, x):
        return ad.tanh(x @ self.W.T + ad.broadcast_to(self.b, (x.shape[0], 5)))


def test_weight_norm_row_of_norm_two():
    W = np.array([[2.0, 0.0], [0.0, 1.0]])
    f = weight_norm_factor(Tensor(W))
    np.testing.assert_allclose(f.data, [0.5, 1.0])
    np.testing.assert_allclose(np.linalg.norm(W * f.data[:, None], axis=1), [1.0, 1.0])


def test_weight_norm_identity_on_normalized_rows():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((6, 4))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    f = weight_norm_factor(Tensor(W))
    np.testing.assert_allclose(W * f.data[:, None], W, rtol=1e-14)


def test_weight_norm_rows_equal_g():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((8, 8))
    g = rng.uniform(0.5, 2.0, size=8)
    f = weight_norm_factor(Tensor(W), g)
    np.testing.assert_allclose(np.linalg.norm(W * f.data[:, None], axis=1), g, atol=1e-12)


def test_weight_norm_zero_row_is_signaled():
    W = np.array([[0.0, 0.0], [1.0, 1.0]])
    with pytest.warns(RuntimeWarning):
        f = weight_norm_factor(Tensor(W))
    assert np.isfinite(f.data).all()


def test_spectral_factor_diagonal():
    W = np.diag([3.0, 1.0])
    f = spectral_norm_factor(Tensor(W), n_power=50)
    assert f.item() == pytest.approx(1 / 3, rel=1e-12)
    assert np.linalg.norm(W * f.item(), 2) == pytest.approx(1.0, rel=1e-12)


def test_spectral_factor_orthogonal():
    q, _ = np.linalg.qr(np.random.default_rng(2).standard_normal((6, 6)))
    assert spectral_norm_factor(Tensor(q), n_power=5).item() == pytest.approx(1.0, rel=1e-12)


def test_power_iteration_matches_svd():
    W = np.random.default_rng(3).standard_normal((32, 32))
    sigma = spectral_sigma(Tensor(W), n_power=50).item()
    top = np.linalg.svd(W, compute_uv=False)[0]
    assert abs(sigma - top) / top < 0.01


def test_power_iteration_unit_vectors():
    W = np.random.default_rng(4).standard_normal((7, 5))
    u, v = power_iteration(W, np.ones(7) / np.sqrt(7), 3)
    assert np.linalg.norm(u) == pytest.approx(1.0)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        power_iteration(W, u, 0)


def test_spectral_zero_matrix_is_signaled():
    with pytest.warns(RuntimeWarning):
        spectral_sigma(Tensor(np.zeros((3, 3))), n_power=2)


def test_clip_factor_crafted_case():
    # g / N(W) = 2.5 and t = 1 gives exactly 1
    W = Tensor(np.diag([2.0, 2.0]))
    state = NormState(kind="weight_norm", raw=W, g=Tensor(np.full(2, 5.0)), t=1.0, u=None)
    out = effective_weight(state)
    np.testing.assert_array_equal(out.data, np.diag([2.0, 2.0]))
    assert clipped(Tensor(2.5), 1.0).item() == 1.0
    assert clipped(Tensor(0.4), 1.0).item() == 0.4
    assert clipped(Tensor(2.5), None).item() == 2.5


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 10.0), st.floats(0.01, 10.0), st.floats(0.1, 5.0))
def test_clip_is_exact_minimum(g, t, scale):
    W = Tensor(np.array([[scale, 0.0], [0.0, -scale]]))
    state = NormState(kind="weight_norm", raw=W, g=Tensor(np.full(2, g)), t=t, u=None)
    out = effective_weight(state)
    factor = min(t, g / scale)
    np.testing.assert_allclose(out.data, W.data * factor, rtol=1e-15)


@pytest.mark.parametrize("kind", ["weight_norm", "spectral_norm"])
def test_apply_preserves_outputs(kind):
    rng = np.random.default_rng(5)
    m = Two(rng)
    x = Tensor(rng.standard_normal((4, 5)))
    before = m(x).data
    apply_norm(m, kind)
    np.testing.assert_allclose(m(x).data, before, rtol=0, atol=1e-12)
    assert set(norm_states(m)) == {"K", "W"}
    assert {"W_orig", "W_g", "K_orig", "K_g"} <= set(vars(m))


def test_apply_filter_out_everything_leaves_module():
    m = Two(np.random.default_rng(6))
    W = m.W
    apply_norm(m, "weight_norm", filter_out=("W", "K"))
    assert m.W is W
    assert norm_states(m) == {}


def test_apply_twice_is_an_error():
    m = Two(np.random.default_rng(7))
    apply_norm(m, "weight_norm")
    with pytest.raises(ValueError):
        apply_norm(m, "weight_norm", filter_out=("K",))


def test_apply_rejects_bad_kind_and_clip():
    m = Two(np.random.default_rng(8))
    with pytest.raises(ValueError):
        apply_norm(m, "batch_norm")
    with pytest.raises(ValueError):
        apply_norm(m, "weight_norm", clip=0.0)
    assert apply_norm(m, "none") is m


@pytest.mark.parametrize("kind", ["weight_norm", "spectral_norm"])
def test_no_scale_fixes_g(kind):
    m = Two(np.random.default_rng(9))
    apply_norm(m, kind, no_scale=True)
    assert "W_g" not in vars(m)
    names = {n for n, _ in m.named_parameters()}
    assert names == {"W_orig", "K_orig", "b"}
    if kind == "weight_norm":
        np.testing.assert_allclose(np.linalg.norm(m.W.data, axis=1), 1.0, rtol=1e-12)
    else:
        assert np.linalg.norm(m.W.data, 2) == pytest.approx(1.0, rel=1e-6)


def test_reset_is_idempotent_and_lazy():
    rng = np.random.default_rng(10)
    m = Two(rng)
    apply_norm(m, "weight_norm")
    reset_norm(m)
    first = m.W.data.copy()
    reset_norm(m)
    np.testing.assert_array_equal(m.W.data, first)
    m.W_orig.data += 0.5
    np.testing.assert_array_equal(m.W.data, first)
    reset_norm(m)
    assert not np.array_equal(m.W.data, first)


def test_solve_performs_one_normalization():
    rng = np.random.default_rng(11)
    model = LinearDeq(3, 8, 2, rng, act="tanh")
    apply_norm(model, "spectral_norm", filter_out=("U", "V"))
    state = norm_states(model)["W"]
    reset_norm(model)
    before = state.computations
    u = model.inject(rng.standard_normal((2, 3)))

    def f(v):
        with ad.no_grad():
            return model.layer(Tensor(v.reshape(2, 8)), u).data.ravel()

    res = solve(f, np.zeros(16), SolverConfig(max_iter=30, tol=1e-30))
    assert res.steps == 30
    assert state.computations == before
    reset_norm(model)
    assert state.computations == before + 1


@pytest.mark.parametrize("kind", ["weight_norm", "spectral_norm"])
def test_remove_norm_preserves_outputs(kind):
    rng = np.random.default_rng(12)
    m = Two(rng)
    apply_norm(m, kind, clip=1.5)
    m.W_orig.data += 0.1 * rng.standard_normal((5, 5))
    m.W_g.data *= 1.3
    reset_norm(m)
    x = Tensor(rng.standard_normal((4, 5)))
    before = m(x).data
    remove_norm(m)
    after = m(x).data
    assert np.max(np.abs(after - before)) < 1e-12
    assert norm_states(m) == {}
    assert "W_orig" not in vars(m) and "W_g" not in vars(m)
    assert m.W.is_leaf and m.W.requires_grad
    assert remove_norm(m) is m
    np.testing.assert_array_equal(m(x).data, after)


def test_spectral_norm_makes_linear_deq_contractive():
    rng = np.random.default_rng(13)
    model = LinearDeq(3, 16, 1, rng, w_norm=4.0)
    apply_norm(model, "spectral_norm", no_scale=True, filter_out=("U", "V"), n_power=30)
    reset_norm(model)
    assert np.linalg.norm(model.W.data, 2) <= 1.0 + 1e-6
    # scale g below one so the map is a strict contraction
    apply_state = norm_states(model)["W"]
    apply_state.g = 0.9
    reset_norm(model)
    u = model.inject(rng.standard_normal((2, 3)))

    def f(v):
        with ad.no_grad():
            return model.layer(Tensor(v.reshape(2, 16)), u).data.ravel()

    res = solve(f, np.zeros(32), SolverConfig(max_iter=400, tol=1e-8))
    assert res.converged


def _fd(fun, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = fun()
        x[i] = old - h
        down = fun()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("kind", ["weight_norm", "spectral_norm"])
def test_gradients_reach_raw_weight_and_scale(kind):
    rng = np.random.default_rng(14)
    raw = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    g0 = np.linalg.norm(raw.data, axis=1) if kind == "weight_norm" else np.array(np.linalg.norm(raw.data, 2))
    g = Tensor(0.8 * g0, requires_grad=True)
    x = rng.standard_normal(4)
    c = rng.standard_normal(4)
    u0 = np.linalg.svd(raw.data)[0][:, 0]

    def loss():
        state = NormState(kind=kind, raw=raw, g=g, t=None, u=u0.copy(), n_power=1)
        return (ad.tanh(effective_weight(state) @ Tensor(x)) * Tensor(c)).sum()

    gW, gg = ad.grad(loss(), [raw, g])
    np.testing.assert_allclose(gW.data, _fd(lambda: loss().item(), raw.data), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(gg.data, _fd(lambda: loss().item(), g.data), rtol=1e-5, atol=1e-8)
