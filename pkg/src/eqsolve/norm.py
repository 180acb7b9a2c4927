"""Weight reparameterization for equilibrium layers.

Both weight norm and spectral norm are expressed as a row-wise rescaling
``W_eff = W o min(t, g / N(W))``.  ``N`` is the row norm (weight norm) or
the largest singular value estimated by power iteration (spectral norm).
Weight norm keeps one learnable scale per output row, spectral norm a
single scalar.

The effective weight is computed once per :func:`reset_norm` and reused by
every call of the layer until the next reset, rather than being rebuilt on
every forward call inside the solver loop.
"""

from __future__ import annotations

import fnmatch
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

NORM_KINDS = ("weight_norm", "spectral_norm", "none")
ZERO_GUARD = 1e-12
INIT_POWER_ITERS = 100


@dataclass
class NormState:
    kind: str
    raw: Tensor
    g: Tensor | float
    t: float | None
    u: np.ndarray | None
    cached_weight: Tensor | None = None
    n_power: int = 1
    computations: int = 0


def _as_matrix(W):
    W = ad.as_tensor(W)
    if W.ndim < 2:
        raise ValueError(f"weight must have at least 2 dims, got shape {W.shape}")
    return W if W.ndim == 2 else W.reshape(W.shape[0], -1)


def row_norms(W):
    """Differentiable L2 norm of each row, guarded away from zero."""
    W = _as_matrix(W)
    n = ad.sqrt((W * W).sum(axis=1))
    if np.any(n.data < ZERO_GUARD):
        warnings.warn("weight has a zero row; its norm is clamped to 1e-12", RuntimeWarning)
    return ad.maximum(n, ZERO_GUARD)


def weight_norm_factor(W, g=None):
    """Per-row factors ``g_i / ||W_i||``; ``g`` defaults to ones."""
    n = row_norms(W)
    if g is None:
        g = Tensor(np.ones(n.shape))
    return ad.as_tensor(g) / n


def power_iteration(W, u, n_power):
    """Run ``n_power`` rounds on a numpy matrix; returns unit ``u``, ``v``."""
    if n_power < 1:
        raise ValueError("n_power must be >= 1")
    for _ in range(n_power):
        v = W.T @ u
        v /= max(np.linalg.norm(v), ZERO_GUARD)
        u = W @ v
        u /= max(np.linalg.norm(u), ZERO_GUARD)
    return u, v


def _initial_u(rows):
    rng = np.random.default_rng(0)
    u = rng.standard_normal(rows)
    return u / np.linalg.norm(u)


def spectral_sigma(W, state=None, n_power=1):
    """Differentiable estimate ``u^T W v`` of the largest singular value.

    ``u`` persists in ``state`` between calls; ``u`` and ``v`` are treated
    as constants for differentiation.
    """
    W = _as_matrix(W)
    u = state.u if state is not None and state.u is not None else _initial_u(W.shape[0])
    u, v = power_iteration(W.data, u, n_power)
    if state is not None:
        state.u = u
    sigma = (Tensor(u) * (W @ Tensor(v))).sum()
    if abs(sigma.data) < ZERO_GUARD:
        warnings.warn("spectral norm of a zero matrix; clamped to 1e-12", RuntimeWarning)
        sigma = ad.maximum(sigma, ZERO_GUARD)
    return sigma


def spectral_norm_factor(W, state=None, n_power=1):
    """Scalar factor ``g / sigma_hat``; ``g`` comes from ``state`` (else 1)."""
    sigma = spectral_sigma(W, state, n_power)
    g = 1.0 if state is None else state.g
    return ad.as_tensor(g) / sigma


def clipped(factor, t):
    """``min(t, factor)``; at a tie the gradient takes the clipped branch."""
    if t is None:
        return factor
    return ad.minimum(factor, Tensor(t))


def effective_weight(state, n_power=None):
    """Recompute ``raw o min(t, g / N(raw))`` for one state."""
    raw = state.raw
    W = _as_matrix(raw)
    if state.kind == "weight_norm":
        f = clipped(weight_norm_factor(W, state.g), state.t)
        out = W * ad.broadcast_to(f.reshape(-1, 1), W.shape)
    elif state.kind == "spectral_norm":
        f = clipped(spectral_norm_factor(W, state, n_power or state.n_power), state.t)
        out = W * f
    else:
        raise ValueError(f"unknown norm kind {state.kind!r}")
    state.computations += 1
    return out.reshape(raw.shape)


def _matches(name, patterns):
    parts = name.split(".")
    return any(fnmatch.fnmatch(name, p) or p in parts for p in patterns)


def _states(module):
    return module.__dict__.setdefault("_norm_states", {})


def apply_norm(module, kind="weight_norm", clip=None, no_scale=False, filter_out=(), n_power=1):
    """Decorate every weight (2-D or higher parameter) of ``module``.

    The raw weight moves to ``<name>_orig`` and the learnable scale to
    ``<name>_g``; ``<name>`` then holds the cached effective weight.  The
    scale starts at the current norm, so the decorated module computes the
    same outputs as before (up to clipping).
    """
    if kind not in NORM_KINDS:
        raise ValueError(f"norm kind must be one of {NORM_KINDS}, got {kind!r}")
    if kind == "none":
        return module
    if clip is not None and not clip > 0:
        raise ValueError(f"clip threshold must be > 0, got {clip}")
    states = _states(module)
    originals = {name + "_orig" for name in states}
    for name, W in list(module.named_tensors()):
        if W.ndim < 2 or name in originals or _matches(name, filter_out):
            continue
        if name in states:
            raise ValueError(f"normalization already applied to {name!r}")
        if not (W.requires_grad and W.is_leaf):
            continue
        owner, attr = module.owner(name)
        M = W.data.reshape(W.shape[0], -1)
        u = None
        if kind == "weight_norm":
            init = np.sqrt((M * M).sum(axis=1))
            init = np.maximum(init, ZERO_GUARD)
        else:
            u, v = power_iteration(M, _initial_u(M.shape[0]), INIT_POWER_ITERS)
            init = np.asarray(max(float(u @ M @ v), ZERO_GUARD))
        if no_scale:
            g = 1.0 if kind == "spectral_norm" else Tensor(np.ones_like(init))
        else:
            g = ad.Tensor(init, requires_grad=True)
            setattr(owner, attr + "_g", g)
        state = NormState(kind=kind, raw=W, g=g, t=clip, u=u, n_power=n_power)
        setattr(owner, attr + "_orig", W)
        states[name] = state
        if kind == "spectral_norm":
            # the stored u already gives sigma == g, so skip the extra power step
            sigma = (Tensor(u) * (_as_matrix(W) @ Tensor(v))).sum()
            f = clipped(ad.as_tensor(g) / sigma, clip)
            state.cached_weight = (_as_matrix(W) * f).reshape(W.shape)
            state.computations += 1
        else:
            state.cached_weight = effective_weight(state)
        setattr(owner, attr, state.cached_weight)
    return module


def reset_norm(module):
    """Recompute each cached effective weight once, for the next step."""
    states = _states(module)
    for name, state in states.items():
        owner, attr = module.owner(name)
        state.cached_weight = effective_weight(state)
        setattr(owner, attr, state.cached_weight)
    module.__dict__["_norm_resets"] = module.__dict__.get("_norm_resets", 0) + 1


def remove_norm(module):
    """Bake the effective weights in as plain parameters and drop all state."""
    states = module.__dict__.get("_norm_states")
    if not states:
        return module
    for name, state in states.items():
        owner, attr = module.owner(name)
        setattr(owner, attr, Tensor(state.cached_weight.data, requires_grad=True))
        for suffix in ("_orig", "_g"):
            owner.__dict__.pop(attr + suffix, None)
    states.clear()
    return module


def norm_states(module):
    return dict(module.__dict__.get("_norm_states", {}))
