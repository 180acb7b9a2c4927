"""Reference gradients for the dense tanh DEQ: finite differences, a
hand-written numpy BPTT, and the IFT / phantom-gradient comparison used by
the ``grad-check`` command.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .backward import GradConfig, attach_ift, attach_phantom
from .core import solve_equilibrium
from .solvers import SolverConfig
from .zoo.linear import LinearDeq

TIGHT = SolverConfig(kind="anderson", max_iter=200, tol=1e-14, m=6, lam=1e-10)


def tanh_problem(seed, d_hidden=16, d_in=4, d_out=2, n=8, w_norm=0.5):
    """A contractive ``tanh`` DEQ with a random regression batch."""
    rng = np.random.default_rng(seed)
    model = LinearDeq(d_in, d_hidden, d_out, rng, w_norm=w_norm, act="tanh")
    x = rng.standard_normal((n, d_in))
    y = rng.standard_normal((n, d_out))
    return model, x, y


def loss_at_equilibrium(model, x, y, solver=TIGHT):
    with ad.no_grad():
        u = model.inject(x)
        z, _ = solve_equilibrium(lambda z: model.layer(z, u), np.zeros(model.state_shape(x)), solver)
        return model.loss(y, model.decode(ad.Tensor(z))).item()


def finite_difference(model, x, y, h=1e-5, solver=TIGHT):
    """Central differences of the equilibrium loss for every parameter entry."""
    out = []
    for p in model.parameters():
        g = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            old = p.data[idx]
            p.data[idx] = old + h
            up = loss_at_equilibrium(model, x, y, solver)
            p.data[idx] = old - h
            down = loss_at_equilibrium(model, x, y, solver)
            p.data[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def model_grads(model, x, y, z_start, cfg):
    """Parameter gradients with the equilibrium attached per ``cfg.mode``."""
    u = model.inject(x)

    def f(z):
        return model.layer(z, u)

    z = attach_ift(f, z_start, cfg) if cfg.mode == "IFT" else attach_phantom(f, z_start, cfg)
    loss = model.loss(y, model.decode(z))
    return [g.data for g in ad.grad(loss, model.parameters())]


def equilibrium(model, x, solver=TIGHT):
    with ad.no_grad():
        u = model.inject(x)
        z, result = solve_equilibrium(lambda z: model.layer(z, u), np.zeros(model.state_shape(x)), solver)
    return z, result


def ift_grads(model, x, y, b_solver=TIGHT):
    z, _ = equilibrium(model, x)
    return model_grads(model, x, y, z, GradConfig(mode="IFT", b_solver=b_solver))


def bptt_reference(model, x, y, z0, K):
    """Plain numpy backprop through ``K`` steps of ``tanh(z W^T + x U^T + b)``.

    Returns gradients in the order of ``model.parameters()`` (U, V, W, b).
    """
    W, U, b, V = model.W.data, model.U.data, model.b.data, model.V.data
    u = x @ U.T + b
    zs = [np.asarray(z0, dtype=float)]
    for _ in range(K):
        zs.append(np.tanh(zs[-1] @ W.T + u))
    pred = zs[-1] @ V.T
    r = pred - y
    gpred = 2.0 * r / r.size
    gV = gpred.T @ zs[-1]
    gz = gpred @ V
    gW = np.zeros_like(W)
    gu = np.zeros_like(u)
    for k in range(K, 0, -1):
        s = gz * (1.0 - zs[k] ** 2)
        gW += s.T @ zs[k - 1]
        gu += s
        gz = s @ W
    gU = gu.T @ x
    gb = gu.sum(axis=0)
    grads = {"U": gU, "V": gV, "W": gW, "b": gb}
    return [grads[name] for name, _ in model.named_parameters()]


def max_rel_error(grads, refs):
    """Largest per-tensor ``||g - ref|| / ||ref||``."""
    worst = 0.0
    for g, r in zip(grads, refs):
        denom = np.linalg.norm(r)
        err = np.linalg.norm(np.asarray(g) - r)
        worst = max(worst, err / denom if denom > 0 else err)
    return worst


def max_abs_delta(grads, refs):
    return max(float(np.max(np.abs(np.asarray(g) - r))) for g, r in zip(grads, refs))


def inner(grads_a, grads_b):
    return float(sum(np.vdot(a, b) for a, b in zip(grads_a, grads_b)))


def cosine(grads_a, grads_b):
    na = np.sqrt(inner(grads_a, grads_a))
    nb = np.sqrt(inner(grads_b, grads_b))
    return inner(grads_a, grads_b) / (na * nb)
