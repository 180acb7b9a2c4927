"""The equilibrium layer: solver, backward pass, normalization and
regularization wired together.

A layer function maps a state (one tensor, or a list of tensors for
multi-variate systems) to a state of the same shapes.  Input injection is
the caller's business: close over ``u(x)`` in the function.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backward import GradConfig, attach_states
from .errors import NonFiniteError, ShapeError
from .norm import norm_states, reset_norm
from .reg import CorrectionConfig, ProbeRng, correction_loss, jac_reg, mixed_init, random_max_iter
from .solvers import SolverConfig, rel_residual, solve

log = logging.getLogger(__name__)

INIT_MODES = ("zeros", "mixed", "provided")


@dataclass
class DeqConfig:
    f_solver: SolverConfig = field(default_factory=SolverConfig)
    grad: GradConfig = field(default_factory=GradConfig)
    correction: CorrectionConfig | None = None
    init_mode: str = "zeros"
    jac_reg_weight: float = 0.0
    jac_reg_probes: int = 1
    random_iters: tuple | None = None

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.jac_reg_weight < 0:
            raise ValueError("jac_reg_weight must be >= 0")
        if self.random_iters is not None:
            lo, hi = self.random_iters
            if not 1 <= lo <= hi:
                raise ValueError(f"random_iters needs 1 <= lo <= hi, got {self.random_iters}")


@dataclass(frozen=True)
class Layout:
    shapes: tuple
    offsets: tuple
    size: int


class StateGroup:
    """Ordered parts of a multi-variate state, e.g. ``[h, c]``."""

    def __init__(self, parts):
        parts = list(parts)
        if not parts:
            raise ValueError("a state group needs at least one part")
        self.parts = parts
        shapes, offsets, off = [], [], 0
        for p in parts:
            shapes.append(tuple(np.shape(p.data if isinstance(p, Tensor) else p)))
            offsets.append(off)
            off += int(np.prod(shapes[-1], dtype=int))
        self.layout = Layout(tuple(shapes), tuple(offsets), off)

    def __len__(self):
        return len(self.parts)

    def __iter__(self):
        return iter(self.parts)

    def __getitem__(self, i):
        return self.parts[i]


def flatten(group):
    """Row-major concatenation of the parts (numpy arrays or tensor data)."""
    if not isinstance(group, StateGroup):
        group = StateGroup(group)
    return np.concatenate([np.asarray(p.data if isinstance(p, Tensor) else p).ravel() for p in group])


def unflatten(vector, layout):
    vector = np.asarray(vector)
    if vector.shape != (layout.size,):
        raise ShapeError(f"vector of shape {vector.shape} does not fit layout of size {layout.size}")
    return StateGroup([
        vector[o:o + int(np.prod(s, dtype=int))].reshape(s).copy()
        for s, o in zip(layout.shapes, layout.offsets)
    ])


def flatten_tensors(parts):
    parts = list(parts)
    if len(parts) == 1:
        return parts[0].reshape(-1)
    return ad.concat([p.reshape(-1) for p in parts])


def unflatten_tensor(vector, layout):
    if len(layout.shapes) == 1:
        return [vector.reshape(layout.shapes[0])]
    return [vector[o:o + int(np.prod(s, dtype=int))].reshape(s)
            for s, o in zip(layout.shapes, layout.offsets)]


def _group_of(z0):
    if isinstance(z0, StateGroup):
        return z0, True
    if isinstance(z0, (list, tuple)):
        return StateGroup(z0), True
    return StateGroup([z0]), False


def vectorize(f, layout, multi):
    """Wrap a layer over parts into a tensor function over flat vectors."""

    def f_vec(z):
        parts = unflatten_tensor(z, layout)
        out = f(parts) if multi else f(parts[0])
        out = list(out) if multi else [out]
        shapes = tuple(tuple(o.shape) for o in out)
        if shapes != layout.shapes:
            raise ShapeError(f"layer changed the state shapes from {layout.shapes} to {shapes}")
        return flatten_tensors(out)

    return f_vec


def deq_forward(f, z0, cfg):
    """Solve for the equilibrium and return differentiable states.

    Returns ``(states, info)``.  ``states`` holds one entry per sampled
    iterate (just the equilibrium unless ``cfg.correction`` asks for more),
    each a tensor or a list of tensors mirroring ``z0``.  ``info`` is a
    plain dict: residual trace, steps, convergence flag.
    """
    group, multi = _group_of(z0)
    layout = group.layout
    f_vec = vectorize(f, layout, multi)

    def f_np(v):
        with ad.no_grad():
            return f_vec(Tensor(v)).data

    spec = cfg.correction.sample_spec if cfg.correction is not None else None
    result = solve(f_np, flatten(group), cfg.f_solver, sample_spec=spec)
    if cfg.grad.mode == "IFT" and result.rel_residual > 10 * cfg.f_solver.tol:
        warnings.warn(
            f"IFT gradient at a poorly converged state (rel residual {result.rel_residual:.3g})",
            RuntimeWarning,
        )
    flat = attach_states(result, f_vec, cfg.grad)
    states = [unflatten_tensor(s, layout) if multi else s.reshape(layout.shapes[0]) for s in flat]
    info = {
        "rel_residual": result.rel_residual,
        "residuals": list(result.residuals),
        "steps": result.steps,
        "converged": result.converged,
        "events": [list(e) for e in result.events],
    }
    return states, info


def solve_equilibrium(f, z0, solver_cfg):
    """Inference only: the equilibrium as numpy parts plus the solver result."""
    group, multi = _group_of(z0)
    f_vec = vectorize(f, group.layout, multi)

    def f_np(v):
        with ad.no_grad():
            return f_vec(Tensor(v)).data

    result = solve(f_np, flatten(group), solver_cfg)
    out = unflatten(result.z_best, group.layout)
    return (list(out) if multi else out[0]), result


class DEQModel:
    """Protocol for :func:`train_step`; subclasses are also ``nn.Module``.

    ``inject(x)`` -> injection, ``layer(z, u)`` -> next state,
    ``decode(z)`` -> prediction, ``loss(y, pred)`` -> scalar tensor,
    ``state_shape(x)`` -> shape of the equilibrium state.
    """

    def inject(self, x):
        raise NotImplementedError

    def layer(self, z, u):
        raise NotImplementedError

    def decode(self, z):
        raise NotImplementedError

    def loss(self, y, pred):
        raise NotImplementedError

    def state_shape(self, x):
        raise NotImplementedError


def initial_state(model, x, cfg, rng=None, z0=None):
    shape = model.state_shape(x)
    if cfg.init_mode == "provided":
        if z0 is None:
            raise ValueError("init_mode 'provided' needs z0")
        return np.asarray(z0, dtype=float).reshape(shape)
    if cfg.init_mode == "mixed":
        rng = rng if rng is not None else np.random.default_rng(0)
        return mixed_init(shape, rng)
    return np.zeros(shape)


def train_step(model, batch, optimizer, cfg, rng=None, z0=None):
    """One optimization step; returns a metrics dict.

    Order: reset normalization once, inject, solve, assemble the loss
    (correction and Jacobian terms as configured), differentiate, update.
    """
    x, y = batch
    if norm_states(model):
        reset_norm(model)
    probe_rng = rng if isinstance(rng, ProbeRng) else ProbeRng(0 if rng is None else rng)
    solver_cfg = cfg.f_solver
    if cfg.random_iters is not None:
        solver_cfg = dataclasses.replace(solver_cfg, max_iter=random_max_iter(*cfg.random_iters, probe_rng))
        step_cfg = dataclasses.replace(cfg, f_solver=solver_cfg)
    else:
        step_cfg = cfg

    u = model.inject(x)

    def f(z):
        return model.layer(z, u)

    init = initial_state(model, x, cfg, rng=probe_rng._rng, z0=z0)
    states, info = deq_forward(f, init, step_cfg)

    if cfg.correction is not None:
        task = correction_loss(states, model.decode, model.loss, y, cfg.correction, f=f, rng=probe_rng)
    else:
        task = model.loss(y, model.decode(states[-1]))
    loss = task
    jr_value = 0.0
    if cfg.jac_reg_weight > 0:
        zl = Tensor(states[-1].data, requires_grad=True)
        with ad.enable_grad():
            jr = jac_reg(f(zl), zl, n_probes=cfg.jac_reg_probes, rng=probe_rng)
        jr_value = jr.item()
        loss = loss + ad.scale(jr, cfg.jac_reg_weight)

    if not np.isfinite(loss.data).all():
        raise NonFiniteError(
            f"non-finite loss (task={task.item()}, jac={jr_value}, "
            f"rel_residual={info['rel_residual']:.3g}, steps={info['steps']})"
        )
    params = model.parameters()
    grads = ad.grad(loss, params)
    optimizer.step(grads)
    return {
        "loss": loss.item(),
        "task_loss": task.item(),
        "jac_loss": jr_value,
        "rel_residual": info["rel_residual"],
        "steps": info["steps"],
        "converged": info["converged"],
    }


def residual_of(f, z):
    """Relative residual of ``z`` under a tensor layer, recomputed from scratch."""
    with ad.no_grad():
        fz = f(Tensor(z)).data
    return rel_residual(fz, np.asarray(z))
