"""Regularizers for the equilibrium landscape.

Jacobian regularization penalizes ``||J_f||_F^2`` at a state through the
Hutchinson estimator ``E ||e^T J||^2``; the probes go through a
reverse-mode vector-Jacobian product built with ``create_graph=True`` so
the penalty stays differentiable in the parameters.  Fixed-point
correction supervises (or Jacobian-regularizes) intermediate solver
states.  Random iteration budgets and mixed initialization target path
independence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .solvers import SampleSpec

VARIANTS = ("supervise_states", "jac_on_states")


class ProbeRng:
    """Seeded probe source; the same seed always yields the same sequence."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.counter = 0
        self._rng = np.random.default_rng(self.seed)

    def normal(self, shape):
        self.counter += 1
        return self._rng.standard_normal(shape)

    def rademacher(self, shape):
        self.counter += 1
        return self._rng.choice(np.array([-1.0, 1.0]), size=shape)

    def integers(self, lo, hi_inclusive):
        self.counter += 1
        return int(self._rng.integers(lo, hi_inclusive + 1))


@dataclass
class CorrectionConfig:
    gamma: float = 0.8
    variant: str = "supervise_states"
    sample_spec: SampleSpec = field(default_factory=SampleSpec)

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def jac_reg(f_z, z, n_probes=1, rng=None, distribution="normal"):
    """Hutchinson estimate of ``||J||_F^2`` where ``J = d f_z / d z``.

    Returns ``(1 / n_probes) * sum_k ||e_k^T J||^2`` as a scalar tensor that
    is differentiable w.r.t. whatever ``f_z`` depends on.
    """
    if not z.requires_grad:
        raise ValueError("z must be recorded on the tape (requires_grad=True)")
    rng = rng if rng is not None else ProbeRng()
    draw = rng.normal if distribution == "normal" else rng.rademacher
    total = Tensor(0.0)
    for _ in range(n_probes):
        eps = draw(f_z.shape)
        (vj,) = ad.backward([f_z], [eps], [z], create_graph=True)
        total = total + (vj * vj).sum()
    return ad.scale(total, 1.0 / n_probes)


def correction_weights(n, gamma):
    """``gamma ** (n - i)`` for i = 1..n; the final state always weighs 1."""
    return [gamma ** (n - i) for i in range(1, n + 1)]


def correction_loss(states, decode, loss_fn, y, cfg, f=None, rng=None, n_probes=1):
    """Loss over a sampled trajectory, ordered by iteration (last = best).

    ``supervise_states``: ``sum_i gamma^(n-i) L(y, decode(z_i))``.
    ``jac_on_states``: ``L(y, decode(z_n)) + gamma * sum_i JR(z_i)`` with fresh
    probes per state; this variant needs the layer ``f``.
    """
    if not states:
        raise ValueError("correction_loss needs at least one state")
    n = len(states)
    if cfg.variant == "supervise_states":
        total = None
        for w, z in zip(correction_weights(n, cfg.gamma), states):
            term = loss_fn(y, decode(z))
            term = term if w == 1.0 else ad.scale(term, w)
            total = term if total is None else total + term
        return total
    loss = loss_fn(y, decode(states[-1]))
    if n == 1:
        return loss
    if f is None:
        raise ValueError("jac_on_states needs the equilibrium function f")
    jr = None
    for z in states:
        zl = Tensor(z.data, requires_grad=True)
        with ad.enable_grad():
            term = jac_reg(f(zl), zl, n_probes=n_probes, rng=rng)
        jr = term if jr is None else jr + term
    return loss + ad.scale(jr, cfg.gamma)


def mixed_init(shape, rng):
    """First ``ceil(B / 2)`` batch slices zero, the rest standard Gaussian."""
    shape = tuple(shape)
    if not shape or shape[0] < 1:
        raise ValueError("mixed_init needs a leading batch dimension >= 1")
    out = np.zeros(shape)
    half = math.ceil(shape[0] / 2)
    out[half:] = rng.standard_normal((shape[0] - half,) + shape[1:])
    return out


def random_max_iter(lo, hi, rng):
    """Uniform integer in ``[lo, hi]`` for a per-step solver budget."""
    if lo < 1 or lo > hi:
        raise ValueError(f"need 1 <= lo <= hi, got lo={lo}, hi={hi}")
    if isinstance(rng, ProbeRng):
        return rng.integers(lo, hi)
    return int(rng.integers(lo, hi + 1))
