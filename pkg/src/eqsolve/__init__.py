"""Deep equilibrium models on numpy: a small reverse-mode autodiff, fixed-point
solvers, implicit and phantom gradients, weight normalization and
regularizers, plus toy models and a command-line harness."""

from .autodiff import Tape, Tensor, backward, grad, no_grad, vjp
from .backward import GradConfig, attach_ift, attach_phantom, ift_backward, phantom_grad
from .core import DeqConfig, StateGroup, deq_forward, flatten, solve_equilibrium, train_step, unflatten
from .errors import EqSolveError, NonFiniteError, ShapeError
from .norm import apply_norm, remove_norm, reset_norm
from .reg import CorrectionConfig, correction_loss, jac_reg, mixed_init, random_max_iter
from .solvers import SampleSpec, SolverConfig, SolverResult, rel_residual, solve

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "grad", "no_grad", "vjp",
    "GradConfig", "attach_ift", "attach_phantom", "ift_backward", "phantom_grad",
    "DeqConfig", "StateGroup", "deq_forward", "flatten", "solve_equilibrium", "train_step", "unflatten",
    "EqSolveError", "NonFiniteError", "ShapeError",
    "apply_norm", "remove_norm", "reset_norm",
    "CorrectionConfig", "correction_loss", "jac_reg", "mixed_init", "random_max_iter",
    "SampleSpec", "SolverConfig", "SolverResult", "rel_residual", "solve",
]
