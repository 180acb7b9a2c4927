"""Equilibrium implicit representation: ``z = sin(W z + u(x) + b)``.

Coordinates live in ``[-1, 1]^2``; the injection ``u(x) = omega (x U^T + c)``
carries the frequency scale, the recurrent weight does not.
"""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..core import DEQModel, train_step
from ..errors import NonFiniteError
from ..nn import Adam, Module, param, scaled_to_norm, uniform_init
from .linear import mse


def coordinate_grid(n):
    """``(n * n, 2)`` pixel centres on ``[-1, 1]^2`` in row-major order."""
    t = np.linspace(-1.0, 1.0, n)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def sinusoid_image(n=32):
    """The reference target: a sum of sinusoids with values in ``[0, 1]``."""
    c = coordinate_grid(n)
    x, y = c[:, 0], c[:, 1]
    img = (0.5
           + 0.2 * np.sin(3 * np.pi * x) * np.cos(2 * np.pi * y)
           + 0.15 * np.sin(2 * np.pi * (x + y))
           + 0.1 * np.cos(4 * np.pi * x - 3 * np.pi * y))
    return img.reshape(n, n)


def psnr(pred, target, peak=1.0):
    err = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    return math.inf if err == 0 else 10.0 * math.log10(peak**2 / err)


def siren_deq_layer(z, u, W, b):
    """One application of the layer to a batch of states ``z`` of shape (N, h)."""
    n = z.shape[0]
    return ad.sin(z @ W.T + u + ad.broadcast_to(b, (n, b.shape[0])))


class SirenDeq(Module, DEQModel):
    def __init__(self, d_hidden, rng, omega=30.0, d_in=2, d_out=1, w_norm=0.5):
        self.omega = float(omega)
        self.U = uniform_init(rng, (d_hidden, d_in), 1.0 / d_in)
        self.c = uniform_init(rng, (d_hidden,), 1.0 / d_in)
        self.W = param(scaled_to_norm(rng, (d_hidden, d_hidden), w_norm))
        self.b = param(np.zeros(d_hidden))
        bound = math.sqrt(6.0 / d_hidden)
        self.V = uniform_init(rng, (d_out, d_hidden), bound)
        self.bo = param(np.zeros(d_out))

    def inject(self, x):
        x = ad.as_tensor(x)
        pre = x @ self.U.T + ad.broadcast_to(self.c, (x.shape[0], self.c.shape[0]))
        return ad.scale(pre, self.omega)

    def layer(self, z, u):
        return siren_deq_layer(z, u, self.W, self.b)

    def decode(self, z):
        return z @ self.V.T + ad.broadcast_to(self.bo, (z.shape[0], self.bo.shape[0]))

    def loss(self, y, pred):
        return mse(y, pred)

    def state_shape(self, x):
        return (np.shape(x)[0], self.W.shape[0])


class SirenMLP(Module):
    """Explicit unrolled baseline: ``depth`` sine layers after the injection."""

    def __init__(self, d_hidden, depth, rng, omega=30.0, d_in=2, d_out=1):
        self.omega = float(omega)
        self.depth = depth
        self.U = uniform_init(rng, (d_hidden, d_in), 1.0 / d_in)
        self.c = uniform_init(rng, (d_hidden,), 1.0 / d_in)
        bound = math.sqrt(6.0 / d_hidden)
        for i in range(depth):
            setattr(self, f"W{i}", uniform_init(rng, (d_hidden, d_hidden), bound))
            setattr(self, f"b{i}", param(np.zeros(d_hidden)))
        self.V = uniform_init(rng, (d_out, d_hidden), bound)
        self.bo = param(np.zeros(d_out))

    def __call__(self, x):
        x = ad.as_tensor(x)
        n = x.shape[0]
        h = ad.sin(ad.scale(x @ self.U.T + ad.broadcast_to(self.c, (n, self.c.shape[0])), self.omega))
        for i in range(self.depth):
            W, b = getattr(self, f"W{i}"), getattr(self, f"b{i}")
            h = ad.sin(h @ W.T + ad.broadcast_to(b, (n, b.shape[0])))
        return h @ self.V.T + ad.broadcast_to(self.bo, (n, self.bo.shape[0]))


def fit_image(model, image, steps, cfg=None, lr=1e-3, seed=0, every=100, callback=None, stop_at=None):
    """Fit ``image`` (values in [0, 1]) and return a list of ``(step, psnr)``.

    ``model`` is a :class:`SirenDeq` (trained with ``train_step`` under
    ``cfg``) or a :class:`SirenMLP` (trained by plain backpropagation).
    Step 0 is always recorded.  With ``stop_at`` set, training ends at the
    first evaluation whose PSNR reaches it.  A non-finite loss stops
    training and is re-raised with the trace so far attached.
    """
    image = np.asarray(image, dtype=float)
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    n = image.shape[0]
    coords = coordinate_grid(n)
    target = image.reshape(-1, 1)
    opt = Adam(model.parameters(), lr=lr)
    trace = [(0, psnr(_predict(model, coords, cfg), target))]
    for step in range(1, steps + 1):
        try:
            if isinstance(model, SirenDeq):
                metrics = train_step(model, (coords, target), opt, cfg, rng=seed + step)
            else:
                loss = mse(target, model(coords))
                opt.step(ad.grad(loss, model.parameters()))
                metrics = {"loss": loss.item()}
        except NonFiniteError as e:
            e.trace = trace
            raise
        if step % every == 0 or step == steps:
            pred = _predict(model, coords, cfg)
            trace.append((step, psnr(pred, target)))
            if callback is not None:
                callback(step, trace[-1][1], metrics)
            if stop_at is not None and trace[-1][1] >= stop_at:
                break
    return trace


def _predict(model, coords, cfg):
    from ..core import solve_equilibrium
    from ..norm import norm_states, reset_norm

    with ad.no_grad():
        if not isinstance(model, SirenDeq):
            return model(coords).data
        if norm_states(model):
            reset_norm(model)
        u = model.inject(coords)
        z, _ = solve_equilibrium(lambda z: model.layer(z, u), np.zeros(model.state_shape(coords)), cfg.f_solver)
        return model.decode(ad.Tensor(z)).data
