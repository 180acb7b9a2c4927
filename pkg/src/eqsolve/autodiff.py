"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Operations on tensors that require
gradients create :class:`Node` records holding the parents and a
vector-Jacobian rule.  Every node gets a monotonically increasing id, so
sorting reachable nodes by id in descending order is a valid reverse
topological order; :func:`backward` relies on this instead of a DFS sort.

Vector-Jacobian rules are written with tensor operations, which makes the
backward sweep itself differentiable when ``create_graph=True``.  That is
what Jacobian regularization needs (a gradient of a ``||v^T J||^2`` term).

Broadcasting is deliberately narrow: operands must have equal shapes or one
of them must be a scalar.  Anything richer goes through the explicit
:func:`broadcast_to`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

from .errors import NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float64

_ids = itertools.count()
_local = threading.local()


def _ctx():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.tapes = []
    return _local


def is_grad_enabled():
    return _ctx().grad_enabled


@contextmanager
def no_grad():
    """Disable recording inside the block."""
    ctx = _ctx()
    prev = ctx.grad_enabled
    ctx.grad_enabled = False
    try:
        yield
    finally:
        ctx.grad_enabled = prev


@contextmanager
def enable_grad():
    ctx = _ctx()
    prev = ctx.grad_enabled
    ctx.grad_enabled = True
    try:
        yield
    finally:
        ctx.grad_enabled = prev


class Node:
    """One recorded operation: parents plus the rule mapping an output
    cotangent to one cotangent per parent (``None`` for no contribution)."""

    __slots__ = ("id", "op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.vjp = vjp

    def __repr__(self):
        return f"Node({self.op}, id={self.id})"


class Tape:
    """Collects every node created while the tape is active.

    Gradients do not need a tape (nodes are reachable through their
    parents); the tape exists for instrumentation, e.g. counting how many
    nodes a solve keeps alive.  Tapes nest; a node is appended to every
    active tape.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ctx().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _ctx().tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [n.op for n in self.nodes]


def _check_finite(op, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: non-finite input")


class Tensor:
    """Dense real array, optionally recorded for differentiation.

    Construction copies ``data`` so tensors behave as values; results of
    operations share nothing with their inputs either.
    """

    __slots__ = ("data", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.node = None

    # -- basic attributes ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.node is None

    @property
    def tape_id(self):
        return None if self.node is None else self.node.id

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(data, parents, vjp, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node = None
    out.requires_grad = False
    ctx = _ctx()
    if ctx.grad_enabled and any(p.requires_grad for p in parents):
        node = Node(op, parents, vjp)
        out.node = node
        out.requires_grad = True
        for tape in ctx.tapes:
            tape.nodes.append(node)
    return out


def _binary_shapes(op, a, b):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _reduce_like(g, shape):
    """Sum a cotangent back down to a scalar operand's shape."""
    if g.shape == shape:
        return g
    return tsum(g)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    _check_finite("add", a.data, b.data)

    def vjp(g):
        return _reduce_like(g, a.shape), _reduce_like(g, b.shape)

    return _wrap(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    _check_finite("sub", a.data, b.data)

    def vjp(g):
        return _reduce_like(g, a.shape), _reduce_like(neg(g), b.shape)

    return _wrap(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    _check_finite("mul", a.data, b.data)

    def vjp(g):
        ga = _reduce_like(g * b, a.shape) if a.requires_grad else None
        gb = _reduce_like(g * a, b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    _check_finite("div", a.data, b.data)

    def vjp(g):
        ga = _reduce_like(g / b, a.shape) if a.requires_grad else None
        gb = _reduce_like(neg(g * a / (b * b)), b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(a.data / b.data, (a, b), vjp, "div")


def neg(a):
    a = as_tensor(a)
    return _wrap(-a.data, (a,), lambda g: (neg(g),), "neg")


def scale(a, c):
    """Multiply by a plain (non-differentiable) number."""
    a = as_tensor(a)
    c = float(c)
    _check_finite("scale", a.data)
    return _wrap(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    _check_finite("pow", a.data)

    def vjp(g):
        return (g * scale(power(a, p - 1.0), p),)

    return _wrap(a.data**p, (a,), vjp, "pow")


def relu(a):
    a = as_tensor(a)
    _check_finite("relu", a.data)
    mask = Tensor(a.data > 0, dtype=a.dtype)
    return _wrap(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a):
    a = as_tensor(a)
    _check_finite("tanh", a.data)

    def vjp(g):
        y = tanh(a)
        return (g * (1.0 - y * y),)

    return _wrap(np.tanh(a.data), (a,), vjp, "tanh")


def sin(a):
    a = as_tensor(a)
    _check_finite("sin", a.data)
    return _wrap(np.sin(a.data), (a,), lambda g: (g * cos(a),), "sin")


def cos(a):
    a = as_tensor(a)
    _check_finite("cos", a.data)
    return _wrap(np.cos(a.data), (a,), lambda g: (neg(g * sin(a)),), "cos")


def exp(a):
    a = as_tensor(a)
    _check_finite("exp", a.data)
    return _wrap(np.exp(a.data), (a,), lambda g: (g * exp(a),), "exp")


def log(a):
    a = as_tensor(a)
    _check_finite("log", a.data)
    return _wrap(np.log(a.data), (a,), lambda g: (g / a,), "log")


def sqrt(a):
    a = as_tensor(a)
    _check_finite("sqrt", a.data)
    return _wrap(np.sqrt(a.data), (a,), lambda g: (g / scale(sqrt(a), 2.0),), "sqrt")


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``b``.

    Called as ``minimum(factor, threshold)`` this puts the gradient of a tie
    on the threshold branch, i.e. the clipped branch.
    """
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("minimum", a, b)
    _check_finite("minimum", a.data, b.data)
    take_a = a.data < b.data
    ma = Tensor(take_a, dtype=a.dtype)
    mb = Tensor(~take_a, dtype=b.dtype)

    def vjp(g):
        return _reduce_like(g * ma, a.shape), _reduce_like(g * mb, b.shape)

    return _wrap(np.where(take_a, a.data, b.data), (a, b), vjp, "minimum")


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("maximum", a, b)
    _check_finite("maximum", a.data, b.data)
    take_a = a.data >= b.data
    ma = Tensor(take_a, dtype=a.dtype)
    mb = Tensor(~take_a, dtype=b.dtype)

    def vjp(g):
        return _reduce_like(g * ma, a.shape), _reduce_like(g * mb, b.shape)

    return _wrap(np.where(take_a, a.data, b.data), (a, b), vjp, "maximum")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "tanh": tanh,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "scale": scale,
}


def elementwise(op, a, b=None):
    """Dispatch by name: ``elementwise("mul", a, b)``, ``elementwise("sin", a)``.

    For ``scale`` the second argument is the plain multiplier.
    """
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "div", "scale"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# -- linear algebra and shape ops -------------------------------------------


def matmul(a, b):
    """``(m,k) @ (k,n)`` or ``(m,k) @ (k,)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_finite("matmul", a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 1:
                ga = reshape(g, (-1, 1)) @ reshape(b, (1, -1))
            else:
                ga = g @ transpose(b)
        if b.requires_grad:
            gb = transpose(a) @ g
        return ga, gb

    return _wrap(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _wrap(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _wrap(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),), "reshape")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    src = a.shape

    def vjp(g):
        if axis is None:
            return (g * Tensor(np.ones(src, dtype=a.dtype)),)
        if not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            kept = list(src)
            for ax in axes:
                kept[ax % len(src)] = 1
            g = reshape(g, tuple(kept))
        return (broadcast_to(g, src),)

    return _wrap(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _sum_to(g, shape):
    """Reduce ``g`` to ``shape`` by summing the axes numpy broadcasting added."""
    lead = g.ndim - len(shape)
    if lead:
        g = tsum(g, axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


def broadcast_to(a, shape):
    """Explicit numpy-style broadcast, e.g. a bias row onto a batch."""
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {src} -> {shape}: {e}") from None
    return _wrap(out, (a,), lambda g: (_sum_to(g, src),), "broadcast_to")


def getitem(a, index):
    a = as_tensor(a)
    src = a.shape
    return _wrap(a.data[index].copy(), (a,), lambda g: (_scatter(g, index, src),), "getitem")


def _scatter(g, index, shape):
    g = as_tensor(g)
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, index, g.data)
    return _wrap(out, (g,), lambda h: (getitem(h, index),), "scatter")


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty list")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    return _wrap(data, tuple(parts), vjp, "concat")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _check_finite("log_softmax", a.data)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        p = exp(log_softmax(a, axis=axis))
        return (g - p * broadcast_to(tsum(g, axis=axis, keepdims=True), a.shape),)

    return _wrap(out, (a,), vjp, "log_softmax")


# -- differentiation ----------------------------------------------------------


def _key(t):
    return ("n", t.node.id) if t.node is not None else ("l", id(t))


def backward(outputs, seeds, inputs, create_graph=False):
    """Reverse sweep from ``outputs`` (seeded by ``seeds``) to ``inputs``.

    Returns one tensor per input; inputs the outputs do not depend on get
    zeros.  Only nodes lying on a path to some input are visited, each once,
    in descending id order.
    """
    outputs = [as_tensor(o) for o in outputs]
    seeds = [Tensor(np.ones(o.shape, dtype=o.dtype)) if s is None else as_tensor(s)
             for o, s in zip(outputs, seeds)]
    for o, s in zip(outputs, seeds):
        if o.shape != s.shape:
            raise ShapeError(f"seed shape {s.shape} does not match output shape {o.shape}")

    # collect reachable nodes
    nodes = {}
    stack = [o.node for o in outputs if o.node is not None]
    while stack:
        node = stack.pop()
        if node.id in nodes:
            continue
        nodes[node.id] = node
        stack.extend(p.node for p in node.parents if p.node is not None)

    wanted = {_key(t) for t in inputs}
    relevant = set()
    for nid in sorted(nodes):
        node = nodes[nid]
        if ("n", nid) in wanted or any(
            _key(p) in wanted or (p.node is not None and p.node.id in relevant)
            for p in node.parents
        ):
            relevant.add(nid)

    grads = {}

    def accumulate(k, g):
        prev = grads.get(k)
        grads[k] = g if prev is None else prev + g

    mode = enable_grad() if create_graph else no_grad()
    with mode:
        for o, s in zip(outputs, seeds):
            accumulate(_key(o), s)
        for nid in sorted(relevant, reverse=True):
            g = grads.get(("n", nid))
            if g is None:
                continue
            node = nodes[nid]
            for p, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = _key(p)
                if k in wanted or (p.node is not None and p.node.id in relevant):
                    accumulate(k, pg)

    result = []
    for t in inputs:
        g = grads.get(_key(t))
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=t.dtype))
        elif not create_graph:
            g = Tensor(g.data)
        result.append(g)
    return result


def grad(loss, params, create_graph=False):
    """d(loss)/d(param) for each param; unconnected params get zeros."""
    loss = as_tensor(loss)
    if loss.size != 1:
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    return backward([loss], [None], list(params), create_graph=create_graph)


def vjp(f, z, v, create_graph=False):
    """``v^T J_f(z)`` for a tensor-valued ``f``.  ``z`` is not modified."""
    zl = Tensor(z.data if isinstance(z, Tensor) else z, requires_grad=True)
    with enable_grad():
        y = f(zl)
    if not isinstance(y, Tensor):
        raise TypeError("f must return a Tensor built from tensor operations")
    v = as_tensor(v)
    if v.shape != y.shape:
        raise ShapeError(f"vjp: v has shape {v.shape}, f(z) has shape {y.shape}")
    return backward([y], [v], [zl], create_graph=create_graph)[0]


def custom_op(value, parents, vjp_fn, op="custom"):
    """Record an opaque operation.

    ``vjp_fn(g)`` receives the output cotangent and returns one cotangent per
    parent (tensor, array or ``None``).  It runs without recording, so a
    custom op is differentiable once, not twice.
    """
    parents = tuple(parents)

    def vjp(g):
        with no_grad():
            out = vjp_fn(g)
        return tuple(None if c is None else as_tensor(c) for c in out)

    return _wrap(Tensor(value).data, parents, vjp, op)


def boundary(tape, *internal):
    """Tensors from outside ``tape`` that its nodes consume and that carry
    gradients: the effective parameters of the recorded computation."""
    ids = {n.id for n in tape.nodes}
    skip = {id(t) for t in internal}
    seen = {}
    for node in tape.nodes:
        for p in node.parents:
            if not p.requires_grad or id(p) in skip:
                continue
            if p.node is not None and p.node.id in ids:
                continue
            seen.setdefault(_key(p), p)
    return list(seen.values())
