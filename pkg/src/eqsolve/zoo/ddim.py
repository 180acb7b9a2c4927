"""Diffusion sampling chains solved step by step or as one equilibrium.

The chain ``z_{t-1} = a_t z_t + b_t eps(z_t, t) + c_t x_t`` for ``t = T..1``
is stacked into ``Z = [z_0, ..., z_{T-1}]`` with

    Z = A Z_T + R (B eps(Z, t) + C X),

``A_ii = prod_{j>=i} a_j``, ``R_ik = prod_{i<=j<k} a_j`` for ``k >= i`` and
``B``, ``C`` diagonal.  The right-hand side only reads ``z_1..z_T``, so the
map is block strictly triangular and fixed-point iteration from any start
is exact after ``T`` sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..core import solve_equilibrium


def ddim_matrices(T, a, b, c):
    """The ``T x T`` chain matrices ``(A, R, B, C)``; entry 1 is step ``t = 1``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    a, b, c = (np.asarray(v, dtype=float).reshape(-1) for v in (a, b, c))
    if not (a.size == b.size == c.size == T):
        raise ValueError(f"a, b, c must each have length T={T}")
    if not np.isfinite(np.concatenate([a, b, c])).all():
        raise ValueError("chain constants must be finite")
    # built from the last step down, in the order the chain unrolls, so each
    # product is bitwise the one the step-by-step recursion produces
    A = np.zeros((T, T))
    R = np.zeros((T, T))
    head = 1.0
    for i in range(T - 1, -1, -1):
        head = a[i] * head
        A[i, i] = head
        if i + 1 < T:
            R[i, i + 1:] = a[i] * R[i + 1, i + 1:]
        R[i, i] = 1.0
    return A, R, np.diag(b), np.diag(c)


@dataclass
class DiffusionChain:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    X: np.ndarray
    z_T: np.ndarray
    t_offset: int = 0

    @property
    def T(self):
        return len(self.a)

    def matrices(self):
        return ddim_matrices(self.T, self.a, self.b, self.c)


def make_chain(T, d, rng, deterministic=False):
    """Synthetic schedule: ``a_t`` in (0.9, 1), ``b_t, c_t`` in (0, 0.1).

    ``deterministic`` zeroes ``c`` (noise-free chain).
    """
    a = rng.uniform(0.9, 1.0, T)
    b = rng.uniform(0.0, 0.1, T)
    c = rng.uniform(0.0, 0.1, T)
    X = rng.standard_normal((T, d))
    z_T = rng.standard_normal(d)
    if deterministic:
        c = np.zeros(T)
    return DiffusionChain(a, b, c, X, z_T)


class AffineDenoiser:
    """``eps(z, t) = M_t z + m_t``; accepts numpy vectors or tensors."""

    def __init__(self, M, m):
        self.M = np.asarray(M, dtype=float)
        self.m = np.asarray(m, dtype=float)

    def __call__(self, z, t):
        if isinstance(z, Tensor):
            return Tensor(self.M[t - 1]) @ z + Tensor(self.m[t - 1])
        return self.M[t - 1] @ z + self.m[t - 1]


def affine_denoiser(T, d, rng, gain=-4.0, spread=0.1):
    """Random affine denoiser ``M_t = gain (I + spread G_t / sqrt(d))``.

    A negative gain mirrors DDIM, where the noise estimate enters each
    step with the opposite sign to the state and so damps it.
    """
    G = rng.standard_normal((T, d, d)) / np.sqrt(d)
    M = gain * (np.eye(d)[None] + spread * G)
    return AffineDenoiser(M, 0.1 * rng.standard_normal((T, d)))


def ddim_sequential(chain, denoiser):
    """Run ``t = T..1`` and return ``[z_0, ..., z_{T-1}]`` as a ``(T, d)`` array."""
    T = chain.T
    out = np.zeros((T, chain.z_T.size))
    z = np.asarray(chain.z_T, dtype=float)
    for t in range(T, 0, -1):
        z = chain.a[t - 1] * z + chain.b[t - 1] * denoiser(z, t + chain.t_offset) + chain.c[t - 1] * chain.X[t - 1]
        out[t - 1] = z
    return out


def ddim_operator(chain, denoiser):
    """The stacked map as a function of the ``T`` parts ``[z_0, ..., z_{T-1}]``."""
    A, R, B, C = chain.matrices()
    T, d = chain.T, chain.z_T.size
    head = Tensor(np.diag(A)[:, None] * chain.z_T[None, :])
    noise = Tensor(np.diag(C)[:, None] * chain.X)
    Rt = Tensor(R)
    b = np.diag(B)
    zT = Tensor(chain.z_T)

    def F(parts):
        inputs = list(parts[1:]) + [zT]
        eps = [ad.scale(denoiser(z, k + 1 + chain.t_offset), b[k]).reshape(1, d) for k, z in enumerate(inputs)]
        out = head + Rt @ (ad.concat(eps, axis=0) + noise)
        return [out[i] for i in range(T)]

    return F


def ddim_parallel(chain, denoiser, cfg, Z0=None):
    """Solve the stacked system; returns ``((T, d) trajectory, solver result)``.

    The default start repeats ``z_T`` in every slot.
    """
    F = ddim_operator(chain, denoiser)
    if Z0 is None:
        Z0 = np.tile(chain.z_T, (chain.T, 1))
    parts, result = solve_equilibrium(F, [np.asarray(z, dtype=float) for z in Z0], cfg)
    return np.stack(parts), result


def ddim_chunk(chain, denoiser, lo, hi, z_hi, cfg):
    """Solve only ``z_lo..z_{hi-1}`` with ``z_hi`` held fixed.

    The chunk is itself a shorter chain started at ``z_hi``; returns the
    ``(hi - lo, d)`` segment and the solver result.
    """
    if not 0 <= lo < hi <= chain.T:
        raise ValueError(f"need 0 <= lo < hi <= T, got lo={lo}, hi={hi}")
    sub = DiffusionChain(
        chain.a[lo:hi], chain.b[lo:hi], chain.c[lo:hi], chain.X[lo:hi],
        np.asarray(z_hi, dtype=float), t_offset=chain.t_offset + lo,
    )
    return ddim_parallel(sub, denoiser, cfg)


def operator_iterations(result):
    """Operator applications that produced the returned iterate."""
    if not result.residuals:
        return 0
    return int(np.argmin(result.residuals))
