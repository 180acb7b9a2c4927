"""Gradients through an equilibrium.

Two backward passes are supported:

* implicit differentiation, which solves the adjoint fixed point
  ``g = J_f(z*)^T g + dL/dz*`` with a black-box solver and then sweeps the
  single recorded application ``f(z*)`` once for the parameter gradients;
* phantom gradients, which record ``K`` damped steps
  ``z <- tau f(z) + (1 - tau) z`` starting at the solver estimate and
  backpropagate through that short unroll.  BPTT is the case ``tau = 1``
  with no forward solve.

``f`` is always a tensor-valued function of a tensor state that closes over
its parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, backward, boundary, custom_op, enable_grad
from .errors import ShapeError
from .solvers import SolverConfig, solve

log = logging.getLogger(__name__)

MODES = ("IFT", "PG")


def _default_b_solver():
    return SolverConfig(kind="fixed_point_iter", max_iter=30, tol=1e-6)


@dataclass
class GradConfig:
    mode: str = "PG"
    b_solver: SolverConfig = field(default_factory=_default_b_solver)
    K: int = 1
    tau: float = 1.0
    grad_z: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        self.K = int(self.K)


def _record(f, z):
    """Record ``f(z)`` with ``z`` as a fresh leaf; returns (leaf, f(z), tape)."""
    zl = Tensor(z.data if isinstance(z, Tensor) else z, requires_grad=True)
    with enable_grad(), Tape() as tape:
        fz = f(zl)
    if not isinstance(fz, Tensor):
        raise TypeError("f must return a Tensor")
    if fz.shape != zl.shape:
        raise ShapeError(f"f maps shape {zl.shape} to {fz.shape}")
    return zl, fz, tape


def solve_adjoint(zl, fz, upstream, b_solver):
    """Solve ``g = J^T g + upstream`` on an already-recorded ``fz = f(zl)``.

    Returns the adjoint (shaped like the state) and the backward
    :class:`SolverResult`.
    """
    up = np.asarray(upstream.data if isinstance(upstream, Tensor) else upstream, dtype=zl.dtype)
    if up.shape != zl.shape:
        raise ShapeError(f"upstream shape {up.shape} does not match state shape {zl.shape}")
    shape = zl.shape
    up_flat = up.ravel()

    def h(g):
        (jt_g,) = backward([fz], [g.reshape(shape)], [zl])
        return jt_g.data.ravel() + up_flat

    result = solve(h, np.zeros_like(up_flat), b_solver)
    if not result.converged:
        log.info("adjoint solve stopped at rel residual %.3g after %d steps",
                 result.rel_residual, result.steps)
    return result.z_best.reshape(shape), result


def ift_backward(f, z_star, upstream, params, cfg):
    """Implicit-differentiation gradient of ``upstream . z*`` w.r.t. ``params``.

    Only one application of ``f`` is recorded, so memory does not grow with
    the number of forward or backward solver steps.
    """
    zl, fz, _ = _record(f, z_star)
    g, _ = solve_adjoint(zl, fz, upstream, cfg.b_solver)
    return backward([fz], [g], list(params))


def attach_ift(f, z_star, cfg):
    """Return ``z*`` as a tensor whose backward runs the adjoint solve.

    Its parents are whatever gradient-carrying tensors ``f`` consumes from
    outside, so downstream code can call :func:`grad` as usual.
    """
    zl, fz, tape = _record(f, z_star)
    parents = boundary(tape, zl)

    def vjp(gout):
        g, _ = solve_adjoint(zl, fz, gout, cfg.b_solver)
        return backward([fz], [g], parents)

    return custom_op(zl.data, parents, vjp, op="ift")


def attach_phantom(f, z_p, cfg):
    """Record ``K`` damped steps from ``z_p`` and return the last one."""
    z = Tensor(z_p.data if isinstance(z_p, Tensor) else z_p, requires_grad=cfg.grad_z)
    tau = cfg.tau
    with enable_grad():
        for _ in range(cfg.K):
            fz = f(z)
            z = fz if tau == 1.0 else fz * tau + z * (1.0 - tau)
    return z


def phantom_grad(f, z_p, upstream, params, cfg):
    """Phantom gradient of ``upstream . z_K`` w.r.t. ``params``."""
    zK = attach_phantom(f, z_p, cfg)
    up = Tensor(upstream)
    if up.shape != zK.shape:
        raise ShapeError(f"upstream shape {up.shape} does not match state shape {zK.shape}")
    return backward([zK], [up], list(params))


def dispatch_modes(n_states, mode):
    """Backward mode per sampled state: the last follows ``mode``, the rest PG."""
    if n_states < 1:
        raise ValueError("need at least one state")
    return ["PG"] * (n_states - 1) + [mode]


def attach_states(result, f, cfg, shape=None):
    """Turn every sampled solver state into a differentiable tensor."""
    out = []
    for z, mode in zip(result.states, dispatch_modes(len(result.states), cfg.mode)):
        z = z if shape is None else z.reshape(shape)
        out.append(attach_ift(f, z, cfg) if mode == "IFT" else attach_phantom(f, z, cfg))
    return out


def backward_dispatch(result, f, upstreams, params, cfg):
    """Per-state parameter gradients for a sampled solver trajectory.

    ``upstreams[i]`` is the loss gradient w.r.t. the i-th returned state.
    Gradients are returned unsummed so callers can weight them.
    """
    if len(upstreams) != len(result.states):
        raise ValueError(f"{len(upstreams)} upstream gradients for {len(result.states)} states")
    grads = []
    for z, up, mode in zip(result.states, upstreams, dispatch_modes(len(result.states), cfg.mode)):
        z = z.reshape(np.shape(up))
        if mode == "IFT":
            grads.append(ift_backward(f, z, up, params, cfg))
        else:
            grads.append(phantom_grad(f, z, up, params, cfg))
    return grads
