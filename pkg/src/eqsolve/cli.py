"""Command-line harness: solver benchmarks, gradient checks, toy trainings
and the parallel diffusion sampler demo.

Every subcommand writes line-delimited JSON: a header record with the fully
resolved configuration, then per-item records, then a summary.  Flags
override values from ``--config`` (``key=value`` lines, keys are flag names
without dashes), which override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
import warnings

import numpy as np

from . import autodiff as ad
from .backward import GradConfig
from .core import DeqConfig, solve_equilibrium, train_step
from .errors import NonFiniteError
from .gradcheck import (
    bptt_reference,
    cosine,
    equilibrium,
    finite_difference,
    ift_grads,
    inner,
    max_abs_delta,
    max_rel_error,
    model_grads,
    tanh_problem,
)
from .nn import make_optimizer
from .norm import NORM_KINDS, apply_norm
from .reg import CorrectionConfig
from .solvers import KINDS, SampleSpec, SolverConfig, rel_residual, solve

log = logging.getLogger("eqsolve")

SUBCOMMANDS = ("bench-solvers", "grad-check", "train", "ddim-demo")


# -- flags ---------------------------------------------------------------------


def add_deq_args(parser):
    """Register the shared equilibrium flags on ``parser``."""
    g = parser.add_argument_group("equilibrium")
    g.add_argument("--ift", action="store_true", help="implicit differentiation backward")
    g.add_argument("--grad", type=int, default=1, metavar="K", help="phantom gradient unroll steps")
    g.add_argument("--tau", type=float, default=1.0, help="phantom gradient damping")
    g.add_argument("--f_solver", choices=KINDS, default=None, help="forward solver")
    g.add_argument("--b_solver", choices=KINDS, default=None, help="backward solver (default: f_solver)")
    g.add_argument("--f_max_iter", type=int, default=40)
    g.add_argument("--b_max_iter", type=int, default=40)
    g.add_argument("--f_tol", type=float, default=1e-6)
    g.add_argument("--b_tol", type=float, default=1e-6)
    g.add_argument("--m", type=int, default=6, help="Anderson window / Broyden memory")
    g.add_argument("--f_tau", type=float, default=1.0, help="Anderson damping")
    g.add_argument("--norm_type", choices=NORM_KINDS, default="none")
    g.add_argument("--norm_no_scale", action="store_true")
    g.add_argument("--norm_clip", action="store_true")
    g.add_argument("--norm_clip_value", type=float, default=1.0)
    g.add_argument("--indexing", type=int, nargs="*", default=None)
    g.add_argument("--n_states", type=int, default=None)
    g.add_argument("--gamma", type=float, default=0.8, help="correction loss decay")
    g.add_argument("--jac_reg_weight", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", default=None, help="key=value file; flags override it")
    g.add_argument("--out", default=None, help="write records here instead of stdout")
    g.add_argument("--timing", action="store_true", help="add wall_ms to records")
    return parser


def build_parser():
    parser = argparse.ArgumentParser(prog="eqsolve", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = add_deq_args(sub.add_parser("bench-solvers", help="solver evaluation counts on linear problems"))
    p.add_argument("--problems", type=int, default=50)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--w_norm", type=float, default=0.95)
    p.add_argument("--solvers", nargs="+", choices=KINDS, default=None)
    p.add_argument("--broyden_m", type=int, default=None, help="Broyden memory (default: f_max_iter)")
    p.set_defaults(f_max_iter=400)

    p = add_deq_args(sub.add_parser("grad-check", help="IFT / phantom gradient verification"))
    p.add_argument("--problems", type=int, default=20)
    p.add_argument("--fd_h", type=float, default=1e-5)
    p.set_defaults(b_tol=1e-12, b_max_iter=200)

    p = add_deq_args(sub.add_parser("train", help="train a toy model"))
    p.add_argument("--task", choices=("linear", "siren", "ignn"), default="linear")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--w_scale", type=float, default=None, help="spectral norm of the initial W")
    p.add_argument("--log_every", type=int, default=None)

    p = add_deq_args(sub.add_parser("ddim-demo", help="parallel vs sequential diffusion sampling"))
    p.add_argument("--T", type=int, default=32)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--gain", type=float, default=-4.0)
    p.add_argument("--stochastic", action="store_true", help="keep the trajectory noise (c_t > 0)")
    p.set_defaults(f_tau=0.8, f_tol=1e-8, f_max_iter=64)
    return parser


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path, subparser):
    """Parse ``key=value`` lines into typed defaults for ``subparser``."""
    actions = {a.dest: a for a in subparser._actions}
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.lstrip("-")
            if key not in actions or key in ("config", "help"):
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            action = actions[key]
            if isinstance(action, argparse._StoreTrueAction):
                out[key] = _parse_bool(value)
            elif action.nargs in ("*", "+"):
                conv = action.type or str
                out[key] = [conv(v) for v in value.split()]
            else:
                conv = action.type or str
                out[key] = conv(value) if value.lower() != "none" else None
            if action.choices is not None and out[key] is not None:
                vals = out[key] if isinstance(out[key], list) else [out[key]]
                bad = [v for v in vals if v not in action.choices]
                if bad:
                    raise ValueError(f"{path}:{lineno}: invalid value {bad[0]!r} for {key}")
    return out


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        subparser = parser._subparsers._group_actions[0].choices[args.subcommand]
        try:
            defaults = read_config(args.config, subparser)
        except (OSError, ValueError) as e:
            parser.error(str(e))
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# -- config assembly -------------------------------------------------------------


def solver_config(args, default_kind="fixed_point_iter"):
    kind = args.f_solver or default_kind
    return SolverConfig(kind=kind, max_iter=args.f_max_iter, tol=args.f_tol, m=args.m, tau=args.f_tau)


def grad_config(args, default_kind="fixed_point_iter"):
    kind = args.b_solver or args.f_solver or default_kind
    b = SolverConfig(kind=kind, max_iter=args.b_max_iter, tol=args.b_tol, m=args.m)
    return GradConfig(mode="IFT" if args.ift else "PG", b_solver=b, K=args.grad, tau=args.tau)


def deq_config(args):
    correction = None
    if args.indexing or args.n_states:
        spec = SampleSpec(indexing=args.indexing or None, n_states=None if args.indexing else args.n_states)
        correction = CorrectionConfig(gamma=args.gamma, sample_spec=spec)
    return DeqConfig(
        f_solver=solver_config(args),
        grad=grad_config(args),
        correction=correction,
        jac_reg_weight=args.jac_reg_weight,
    )


def maybe_apply_norm(model, args, skip=()):
    if args.norm_type == "none":
        return model
    clip = args.norm_clip_value if args.norm_clip else None
    return apply_norm(model, args.norm_type, clip=clip, no_scale=args.norm_no_scale, filter_out=skip)


# -- output ----------------------------------------------------------------------


class Writer:
    """Single writer for JSON records; ``wall_ms`` only when timing is on."""

    def __init__(self, stream, timing=False):
        self.stream = stream
        self.timing = timing
        self._t0 = time.perf_counter()
        self.nonfinite = False

    def emit(self, record):
        if self.timing:
            record = dict(record, wall_ms=round(1000 * (time.perf_counter() - self._t0), 3))
        self.stream.write(json.dumps(record, sort_keys=True) + "\n")
        self.stream.flush()


def _f(x):
    return float(x)


# -- subcommands -----------------------------------------------------------------


def linear_problem(seed, n, w_norm):
    """``f(z) = W z + b`` with symmetric ``W`` of spectral norm ``w_norm``."""
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    W = G + G.T
    W *= w_norm / np.linalg.norm(W, 2)
    b = rng.standard_normal(n)
    return W, b


def evals_to_tol(residuals, tol):
    for i, r in enumerate(residuals):
        if r < tol:
            return i + 1
    return None


def tail_rate(residuals):
    """Median ratio of consecutive residuals over the second half of a trace."""
    r = np.asarray(residuals)
    r = r[len(r) // 2:]
    r = r[r > 0]
    if len(r) < 2:
        return None
    return float(np.median(r[1:] / r[:-1]))


def cmd_bench_solvers(args, out):
    kinds = [args.f_solver] if args.f_solver else (args.solvers or ["fixed_point_iter", "anderson", "broyden"])
    counts = {k: [] for k in kinds}
    for p in range(args.problems):
        W, b = linear_problem(args.seed * 100003 + p, args.n, args.w_norm)
        z0 = np.zeros(args.n)
        for kind in kinds:
            m = (args.broyden_m or max(args.f_max_iter, 1)) if kind == "broyden" else args.m
            cfg = SolverConfig(kind=kind, max_iter=args.f_max_iter, tol=args.f_tol, m=m, tau=args.f_tau)
            res = solve(lambda z: W @ z + b, z0, cfg)
            k = evals_to_tol(res.residuals, args.f_tol)
            counts[kind].append(k if k is not None else math.inf)
            out.emit({
                "type": "problem", "problem": p, "solver": kind, "f_evals": res.steps,
                "evals_to_tol": k, "converged": res.converged, "rel_residual": _f(res.rel_residual),
                "residuals": [_f(r) for r in res.residuals], "rate": tail_rate(res.residuals),
                "dz0": _f(np.linalg.norm(res.z_best - z0)),
            })
    out.emit({
        "type": "summary",
        "median_evals": {k: _f(np.median(v)) if v else None for k, v in counts.items()},
        "converged_fraction": {k: _f(np.mean(np.isfinite(v))) if v else None for k, v in counts.items()},
    })
    return 0


def cmd_grad_check(args, out):
    gcfg = grad_config(args)
    solver = solver_config(args)
    positive, cosines, deltas, fd_err = 0, [], [], None
    for p in range(args.problems):
        model, x, y = tanh_problem(args.seed * 100003 + p)
        g_ift = ift_grads(model, x, y)
        z0 = np.zeros(model.state_shape(x))
        if args.f_max_iter > 0:
            z_start, _ = solve_equilibrium(lambda z, u=model.inject(x): model.layer(z, u), z0, solver)
        else:
            z_start = z0
        pg_cfg = GradConfig(mode="PG", K=args.grad, tau=args.tau)
        g_pg = model_grads(model, x, y, z_start, pg_cfg)
        ip = inner(g_pg, g_ift)
        positive += ip > 0
        cosines.append(cosine(g_pg, g_ift))
        rec = {"type": "problem", "problem": p, "inner": ip, "cosine": cosines[-1]}
        if args.f_max_iter == 0 and args.tau == 1.0:
            deltas.append(max_abs_delta(g_pg, bptt_reference(model, x, y, z0, args.grad)))
            rec["pg_bptt_delta"] = deltas[-1]
        if args.ift and p == 0:
            z_star, _ = equilibrium(model, x)
            g_engine = model_grads(model, x, y, z_star, gcfg)
            fd_err = max_rel_error(g_engine, finite_difference(model, x, y, h=args.fd_h))
            rec["ift_fd_rel_err"] = fd_err
        out.emit(rec)
    summary = {
        "type": "summary",
        "positive_inner_fraction": positive / max(args.problems, 1),
        "min_cosine": min(cosines) if cosines else None,
        "mean_cosine": _f(np.mean(cosines)) if cosines else None,
    }
    if fd_err is not None:
        summary["max_rel_err_ift_fd"] = fd_err
    if deltas:
        summary["max_pg_bptt_delta"] = max(deltas)
    out.emit(summary)
    return 0


TRAIN_DEFAULTS = {
    "linear": {"steps": 200, "lr": 1e-2, "hidden": 16, "w_scale": 0.5, "log_every": 20},
    "siren": {"steps": 2000, "lr": 1e-3, "hidden": 64, "w_scale": 0.5, "log_every": 100},
    "ignn": {"steps": 100, "lr": 1e-2, "hidden": 16, "w_scale": 0.9, "log_every": 10},
}


def build_task(args):
    """Model, batch and an evaluation function for ``--task``."""
    from .zoo import IGNN, LinearDeq, SirenDeq, coordinate_grid, psnr, regression_data, sinusoid_image
    from .zoo.ignn import accuracy, two_community_graph

    rng = np.random.default_rng(args.seed)
    if args.task == "linear":
        x, y = regression_data(rng, 64, 4, 2)
        model = LinearDeq(4, args.hidden, 2, rng, w_norm=args.w_scale)
        skip = ("U", "V")

        def evaluate(z):
            return {"mse": _f(np.mean((model.decode(ad.Tensor(z)).data - y) ** 2))}

        return model, (x, y), evaluate, skip
    if args.task == "siren":
        image = sinusoid_image(32)
        x, y = coordinate_grid(32), image.reshape(-1, 1)
        model = SirenDeq(args.hidden, rng, w_norm=args.w_scale)
        skip = ("U", "V")

        def evaluate(z):
            return {"psnr": psnr(model.decode(ad.Tensor(z)).data, y)}

        return model, (x, y), evaluate, skip
    graph = two_community_graph(rng)
    model = IGNN(graph, args.hidden, rng, w_norm=args.w_scale)

    def evaluate(z):
        logits = model.decode(ad.Tensor(z)).data
        return {"train_acc": accuracy(logits, graph.labels, graph.train_idx),
                "test_acc": accuracy(logits, graph.labels, graph.test_idx)}

    return model, (graph.X, (graph.train_idx, graph.labels)), evaluate, IGNN.NORM_SKIP


def run_training(args, out):
    """Train ``args.task``; returns the summary record."""
    for key, value in TRAIN_DEFAULTS[args.task].items():
        if getattr(args, key) is None:
            setattr(args, key, value)
    model, batch, evaluate, skip = build_task(args)
    maybe_apply_norm(model, args, skip)
    cfg = deq_config(args)
    opt = make_optimizer(args.optimizer, model.parameters(), args.lr)
    residuals, evals = [], []
    summary = {"type": "summary", "task": args.task, "diverged": False, "nonfinite": False}
    step = 0
    try:
        for step in range(1, args.steps + 1):
            m = train_step(model, batch, opt, cfg, rng=args.seed * 100003 + step)
            residuals.append(m["rel_residual"])
            evals.append(m["steps"])
            if step % args.log_every == 0 or step == args.steps:
                out.emit({"type": "step", "step": step, "loss": m["loss"], "rel_residual": m["rel_residual"],
                          "f_evals": m["steps"], "converged": m["converged"]})
    except NonFiniteError as e:
        log.error("training stopped at step %d: %s", step, e)
        summary.update(nonfinite=True, diverged=True, failed_step=step)
    if not summary["nonfinite"]:
        x = batch[0]
        with ad.no_grad():
            u = model.inject(x)
            z, res = solve_equilibrium(lambda z: model.layer(z, u), np.zeros(model.state_shape(x)), cfg.f_solver)
        summary.update(evaluate(z))
        summary["final_rel_residual"] = _f(res.rel_residual)
    max_res = max(residuals) if residuals else None
    summary.update(
        steps=step,
        max_rel_residual=max_res,
        median_f_evals=_f(np.median(evals)) if evals else None,
    )
    if max_res is not None and not max_res < 1.0:
        summary["diverged"] = True
    return summary


def cmd_train(args, out):
    summary = run_training(args, out)
    out.emit(summary)
    return 1 if summary["nonfinite"] else 0


def cmd_ddim_demo(args, out):
    from .zoo.ddim import affine_denoiser, ddim_parallel, ddim_sequential, make_chain, operator_iterations

    rng = np.random.default_rng(args.seed)
    chain = make_chain(args.T, args.d, rng, deterministic=not args.stochastic)
    den = affine_denoiser(args.T, args.d, rng, gain=args.gain)
    seq = ddim_sequential(chain, den)
    kinds = [args.f_solver] if args.f_solver else ["fixed_point_iter", "anderson"]
    iters = {}
    for kind in kinds:
        cfg = SolverConfig(kind=kind, max_iter=args.f_max_iter, tol=args.f_tol, m=args.m, tau=args.f_tau)
        Z, res = ddim_parallel(chain, den, cfg)
        iters[kind] = operator_iterations(res)
        out.emit({
            "type": "solve", "solver": kind, "iterations": iters[kind], "f_evals": res.steps,
            "converged": res.converged, "rel_residual": _f(res.rel_residual),
            "max_abs_deviation": _f(np.max(np.abs(Z - seq))),
            "residuals": [_f(r) for r in res.residuals],
        })
    out.emit({"type": "summary", "T": args.T, "iterations": iters})
    return 0


COMMANDS = {
    "bench-solvers": cmd_bench_solvers,
    "grad-check": cmd_grad_check,
    "train": cmd_train,
    "ddim-demo": cmd_ddim_demo,
}


def _resolved(args):
    cfg = {k: v for k, v in vars(args).items() if k not in ("out", "timing")}
    cfg["f_solver_resolved"] = args.f_solver or "fixed_point_iter"
    cfg["b_solver_resolved"] = args.b_solver or args.f_solver or "fixed_point_iter"
    return cfg


def configure_logging():
    level = os.environ.get("EQSOLVE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    configure_logging()
    args = parse_args(argv)
    stream = open(args.out, "w") if args.out else sys.stdout
    out = Writer(stream, timing=args.timing)
    try:
        if args.subcommand == "train":
            for key, value in TRAIN_DEFAULTS[args.task].items():
                if getattr(args, key) is None:
                    setattr(args, key, value)
        out.emit({"type": "header", "subcommand": args.subcommand, "config": _resolved(args)})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                code = COMMANDS[args.subcommand](args, out)
            except NonFiniteError as e:
                out.emit({"type": "error", "error": "nonfinite", "message": str(e)})
                code = 1
    finally:
        if args.out:
            stream.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
