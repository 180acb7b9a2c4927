"""Minimal module container and the two optimizers the trainers use."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Module:
    """Holds parameters as ``Tensor`` attributes and child modules.

    Parameters are leaf tensors with ``requires_grad``; derived tensors
    (e.g. the cached output of a weight normalization) are attributes too
    but are skipped by :meth:`named_parameters` because they are not leaves.
    Names are dotted paths, iterated in sorted order for determinism.
    """

    def named_children(self):
        for name in sorted(vars(self)):
            value = getattr(self, name)
            if isinstance(value, Module):
                yield name, value

    def named_tensors(self, prefix=""):
        for name in sorted(vars(self)):
            value = getattr(self, name)
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_tensors(prefix + name + ".")

    def named_parameters(self):
        for name, t in self.named_tensors():
            if t.requires_grad and t.is_leaf:
                yield name, t

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_weights(self):
        """Tensors eligible for weight normalization: 2-D or higher."""
        for name, t in self.named_tensors():
            if t.ndim >= 2 and (t.requires_grad or not t.is_leaf):
                yield name, t

    def owner(self, dotted):
        """Return ``(module, attribute)`` addressed by a dotted name."""
        *path, attr = dotted.split(".")
        mod = self
        for part in path:
            mod = getattr(mod, part)
        return mod, attr

    def state_dict(self):
        return {name: t.numpy() for name, t in self.named_parameters()}


def param(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def uniform_init(rng, shape, bound):
    return param(rng.uniform(-bound, bound, size=shape))


def scaled_to_norm(rng, shape, target):
    """Gaussian matrix rescaled to spectral norm ``target``."""
    w = rng.standard_normal(shape)
    return w * (target / np.linalg.norm(w, 2))


class SGD:
    def __init__(self, params, lr=1e-2, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        for p, g, buf in zip(self.params, grads, self._buf):
            g = g.data if isinstance(g, Tensor) else g
            if self.momentum:
                buf *= self.momentum
                buf += g
                g = buf
            if self.lr:
                p.data -= self.lr * g


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            g = g.data if isinstance(g, Tensor) else g
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.lr:
                p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name, params, lr):
    if name == "sgd":
        return SGD(params, lr=lr)
    if name == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")
