"""Dense toy DEQ ``z = act(z W^T + x U^T + b)`` on batch-leading states."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..core import DEQModel
from ..nn import Module, param, scaled_to_norm

ACTIVATIONS = {"identity": lambda t: t, "tanh": ad.tanh, "relu": ad.relu}


def mse(y, pred):
    d = pred - ad.as_tensor(y)
    return (d * d).mean()


class LinearDeq(Module, DEQModel):
    """Affine layer (optionally followed by ``tanh``/``relu``) with a linear readout.

    ``W`` starts at spectral norm ``w_norm`` so the layer is contractive.
    """

    def __init__(self, d_in, d_hidden, d_out, rng, w_norm=0.5, act="identity"):
        if act not in ACTIVATIONS:
            raise ValueError(f"act must be one of {sorted(ACTIVATIONS)}")
        self.act = act
        self.W = param(scaled_to_norm(rng, (d_hidden, d_hidden), w_norm))
        self.U = param(rng.standard_normal((d_hidden, d_in)) / np.sqrt(d_in))
        self.b = param(0.1 * rng.standard_normal(d_hidden))
        self.V = param(rng.standard_normal((d_out, d_hidden)) / np.sqrt(d_hidden))

    def inject(self, x):
        x = ad.as_tensor(x)
        return x @ self.U.T + ad.broadcast_to(self.b, (x.shape[0], self.b.shape[0]))

    def layer(self, z, u):
        return ACTIVATIONS[self.act](z @ self.W.T + u)

    def decode(self, z):
        return z @ self.V.T

    def loss(self, y, pred):
        return mse(y, pred)

    def state_shape(self, x):
        return (np.shape(x)[0], self.W.shape[0])


def regression_data(rng, n, d_in, d_out):
    """Inputs and targets from a random linear teacher plus a little noise."""
    x = rng.standard_normal((n, d_in))
    teacher = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
    y = x @ teacher.T + 0.01 * rng.standard_normal((n, d_out))
    return x, y
