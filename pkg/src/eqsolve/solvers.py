"""Black-box fixed-point solvers over flat numpy state vectors.

All solvers share the same accounting: every call of ``f`` is one step,
and each step yields the relative residual of the iterate it was called
on.  The returned ``z_best`` is the evaluated iterate with the lowest
residual, so ``min(residuals)`` is always reproducible from ``z_best``.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError

log = logging.getLogger(__name__)

KINDS = ("fixed_point_iter", "anderson", "broyden")
RESIDUAL_EPS = 1e-8


@dataclass
class SolverConfig:
    kind: str = "fixed_point_iter"
    max_iter: int = 40
    tol: float = 1e-6
    m: int = 6
    tau: float = 1.0
    alpha: float = 1.0
    lam: float = 1e-4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown solver kind {self.kind!r}; expected one of {KINDS}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 0:
            raise ValueError(f"max_iter must be a count >= 0, got {self.max_iter}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        self.max_iter = int(self.max_iter)
        self.m = int(self.m)


@dataclass
class SampleSpec:
    """Which intermediate iterates to keep: explicit ``indexing`` or
    ``n_states`` spread uniformly over ``max_iter``."""

    indexing: list | None = None
    n_states: int | None = None

    def __post_init__(self):
        if self.indexing is not None and self.n_states is not None:
            raise ValueError("give either indexing or n_states, not both")
        if self.n_states is not None and self.n_states < 1:
            raise ValueError("n_states must be >= 1")

    def indices(self, max_iter):
        """Intermediate indices, excluding the final state (always appended)."""
        if self.indexing is not None:
            idx = sorted(int(i) for i in self.indexing)
            bad = [i for i in idx if i < 0 or i >= max_iter]
            if bad:
                raise ValueError(f"indexing {bad} outside [0, max_iter={max_iter})")
            return idx
        if self.n_states is not None:
            k = self.n_states
            return [math.ceil(j * max_iter / k) for j in range(1, k)]
        return []


@dataclass
class SolverResult:
    z_best: np.ndarray
    states: list
    residuals: list
    steps: int
    converged: bool
    events: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def rel_residual(self):
        return min(self.residuals) if self.residuals else math.inf


def rel_residual(f_z, z):
    """``||f_z - z|| / (||z|| + 1e-8)``."""
    f_z = np.asarray(f_z)
    z = np.asarray(z)
    if f_z.shape != z.shape:
        raise ShapeError(f"rel_residual: shapes {f_z.shape} and {z.shape} differ")
    if not (np.all(np.isfinite(f_z)) and np.all(np.isfinite(z))):
        raise NonFiniteError("rel_residual: non-finite input")
    return float(np.linalg.norm(f_z - z) / (np.linalg.norm(z) + RESIDUAL_EPS))


class _Run:
    """Shared bookkeeping: evaluation count, residual trace, best iterate,
    sampled states and early stopping."""

    def __init__(self, f, z0, cfg, record=(), callback=None):
        self.f = f
        self.cfg = cfg
        self.z0 = np.array(z0, dtype=float if np.asarray(z0).dtype.kind != "f" else None)
        self.record = set(record)
        self.recorded = {}
        self.callback = callback
        self.residuals = []
        self.events = []
        self.z_best = self.z0.copy()
        self.best = math.inf
        self.converged = False

    @property
    def steps(self):
        return len(self.residuals)

    @property
    def done(self):
        return self.converged or self.steps >= self.cfg.max_iter

    def signal(self, message):
        self.events.append((self.steps, message))
        log.debug("step %d: %s", self.steps, message)

    def evaluate(self, z):
        k = self.steps
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite iterate at step {k}", last_finite=self.z_best.copy())
        try:
            fz = np.asarray(self.f(z))
        except NonFiniteError as e:
            raise NonFiniteError(f"f raised at step {k}: {e}", last_finite=self.z_best.copy()) from e
        if fz.shape != z.shape:
            raise ShapeError(f"f changed the state shape from {z.shape} to {fz.shape}")
        if not np.all(np.isfinite(fz)):
            raise NonFiniteError(f"f produced NaN/Inf at step {k}", last_finite=self.z_best.copy())
        r = rel_residual(fz, z)
        self.residuals.append(r)
        if k in self.record:
            self.recorded[k] = z.copy()
        if r < self.best:
            self.best = r
            self.z_best = z.copy()
        if r <= self.cfg.tol:
            self.converged = True
        if self.callback is not None:
            self.callback(k, z, fz)
        return fz

    def result(self, indices=(), **extra):
        states = [self.recorded.get(i, self.z_best).copy() for i in indices]
        states.append(self.z_best.copy())
        return SolverResult(
            z_best=self.z_best.copy(),
            states=states,
            residuals=list(self.residuals),
            steps=self.steps,
            converged=self.converged,
            events=list(self.events),
            extra=extra,
        )


def fixed_point_iter(f, z0, cfg, indices=(), callback=None):
    """Plain iteration ``z <- f(z)``."""
    run = _Run(f, z0, cfg, indices, callback)
    z = run.z0.copy()
    while not run.done:
        fz = run.evaluate(z)
        z = fz
    return run.result(indices)


def anderson_coefficients(G, lam):
    """Mixing weights minimizing ``||G alpha||`` subject to ``sum(alpha) == 1``.

    The constraint is eliminated by writing the last weight as one minus the
    others; the remaining least-squares problem is solved through
    Tikhonov-regularized normal equations.  ``lam`` scales each diagonal
    entry of the normal matrix (equivalently, plain Tikhonov on unit-norm
    columns) so the regularization does not swamp the solve once residuals
    get small.  Returns ``None`` when the system is
    singular.
    """
    p = G.shape[1]
    if p == 1:
        return np.ones(1)
    last = G[:, -1]
    D = G[:, :-1] - last[:, None]
    H = D.T @ D
    d = np.diag(H).copy()
    if not np.all(d > 0):
        return None
    H[np.diag_indices_from(H)] += lam * d
    try:
        beta = np.linalg.solve(H, -D.T @ last)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(beta)):
        return None
    return np.append(beta, 1.0 - beta.sum())


def anderson(f, z0, cfg, indices=(), callback=None):
    """Anderson mixing over a window of the latest ``m + 1`` iterates.

    The next iterate is ``tau * F @ alpha + (1 - tau) * Z @ alpha`` where the
    columns of ``Z``/``F`` are stored iterates and their images.
    """
    run = _Run(f, z0, cfg, indices, callback)
    Z = deque(maxlen=cfg.m + 1)
    F = deque(maxlen=cfg.m + 1)
    alpha_sums = []
    tau = cfg.tau
    z = run.z0.copy()
    while not run.done:
        fz = run.evaluate(z)
        if run.done:
            break
        Z.append(z)
        F.append(fz)
        Zm = np.stack(Z, axis=1)
        Fm = np.stack(F, axis=1)
        alpha = anderson_coefficients(Fm - Zm, cfg.lam)
        if alpha is None:
            run.signal("anderson: singular least-squares system, damped plain step")
            z = tau * fz + (1.0 - tau) * z
            continue
        alpha_sums.append(float(alpha.sum()))
        z = tau * (Fm @ alpha) + (1.0 - tau) * (Zm @ alpha)
    return run.result(indices, alpha_sums=alpha_sums)


class BroydenState:
    """Inverse-Jacobian estimate ``B = B0 + U V^T`` with ``B0 = -I``.

    Holds at most ``m`` rank-one terms; the oldest is dropped first when the
    budget is exceeded.
    """

    def __init__(self, n, m, dtype=np.float64):
        self.n = n
        self.m = m
        self.U = np.zeros((n, m), dtype=dtype)
        self.V = np.zeros((n, m), dtype=dtype)
        self.count = 0

    def apply(self, x):
        c = self.count
        return -x + self.U[:, :c] @ (self.V[:, :c].T @ x)

    def apply_T(self, x):
        c = self.count
        return -x + self.V[:, :c] @ (self.U[:, :c].T @ x)

    def dense(self):
        c = self.count
        return -np.eye(self.n) + self.U[:, :c] @ self.V[:, :c].T

    def update(self, dz, dg):
        """Sherman-Morrison secant update; returns False if skipped."""
        Bdg = self.apply(dg)
        vT = self.apply_T(dz)
        den = float(vT @ dg)
        scale = np.linalg.norm(vT) * np.linalg.norm(dg)
        if not np.isfinite(den) or abs(den) <= 1e-12 * scale or scale == 0.0:
            return False
        u = (dz - Bdg) / den
        if self.count == self.m:
            self.U[:, :-1] = self.U[:, 1:]
            self.V[:, :-1] = self.V[:, 1:]
            self.count -= 1
        self.U[:, self.count] = u
        self.V[:, self.count] = vT
        self.count += 1
        return True


def broyden(f, z0, cfg, indices=(), callback=None):
    """Quasi-Newton root finding on ``g(z) = f(z) - z``.

    ``z <- z - alpha * B g(z)``; with ``B0 = -I`` and ``alpha = 1`` the first
    step is a plain fixed-point step.
    """
    run = _Run(f, z0, cfg, indices, callback)
    z = run.z0.copy()
    state = BroydenState(z.size, cfg.m, dtype=z.dtype)
    skipped = 0
    z_prev = g_prev = None
    while not run.done:
        fz = run.evaluate(z)
        if run.done:
            break
        g = fz - z
        if z_prev is not None and not state.update(z - z_prev, g - g_prev):
            skipped += 1
            run.signal("broyden: degenerate secant denominator, update skipped")
        z_prev, g_prev = z, g
        z = z - cfg.alpha * state.apply(g)
    return run.result(indices, state=state, skipped=skipped)


_SOLVERS = {
    "fixed_point_iter": fixed_point_iter,
    "anderson": anderson,
    "broyden": broyden,
}


def register_solver(name, fn):
    """Make ``fn(f, z0, cfg, indices=(), callback=None)`` selectable by name."""
    global KINDS
    _SOLVERS[name] = fn
    if name not in KINDS:
        KINDS = KINDS + (name,)


def solve(f, z0, cfg, sample_spec=None, callback=None):
    """Run the configured solver on a flat state and keep sampled states.

    ``states`` lists the requested intermediate iterates in index order and
    always ends with ``z_best``.  Requested iterations the solver never
    reached (early convergence) repeat ``z_best``.
    """
    z0 = np.asarray(z0)
    if z0.ndim != 1:
        raise ShapeError(f"solvers work on flat vectors, got shape {z0.shape}")
    indices = sample_spec.indices(cfg.max_iter) if sample_spec is not None else []
    return _SOLVERS[cfg.kind](f, z0, cfg, indices=indices, callback=callback)
