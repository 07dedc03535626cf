"""Minimal L-BFGS minimizer and the volatility-curve calibration driver.

The minimizer is the standard two-loop recursion with a backtracking
Armijo line search (optional Wolfe curvature check) and an optional
elementwise lower bound enforced by projection.  The calibration driver
feeds it stochastic gradients from one of the Monte-Carlo adjoint
estimators; the path set is regenerated from (seed, iteration) at the
start of every iteration and frozen while that iteration's line search
runs, so each line search sees a coherent objective.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from . import model as mdl
from . import rng_paths as rng

__all__ = [
    "LbfgsConfig",
    "TraceRecord",
    "CalibrationTrace",
    "lbfgs_minimize",
    "calibrate",
    "write_trace_csv",
    "read_trace_csv",
]

_ESTIMATORS = {1: est.grad_est1, 2: est.grad_est2, 3: est.grad_est3}


@dataclass
class LbfgsConfig:
    memory: int = 8
    max_iter: int = 100
    grad_norm_tol: float = 1e-8
    armijo_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_backtracks: int = 20
    wolfe_check: bool = False
    param_floor: float | None = None
    max_step: float | None = None   # cap on the per-iteration step, inf-norm

    def __post_init__(self):
        if not 0 < self.armijo_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < armijo_c1 < wolfe_c2 < 1")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.max_step is not None and self.max_step <= 0:
            raise ValueError("max_step must be positive")


@dataclass
class TraceRecord:
    iteration: int
    loss: float
    grad_norm: float
    params: np.ndarray
    f_evals: int
    r_evals: int
    millis: float


@dataclass
class CalibrationTrace:
    records: list = field(default_factory=list)
    status: str = "running"

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must be strictly increasing")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])


class _CallCounter:
    """Default cost model: one F per value callback, one F+R per gradient."""

    def __init__(self):
        self.f_evals = 0
        self.r_evals = 0


def _project(x, floor):
    return x if floor is None else np.maximum(x, floor)


def lbfgs_minimize(fg, x0, config: LbfgsConfig = None, *, value_fn=None,
                   cost_tracker=None, step_setup=None):
    """Minimize a callback returning ``(value, gradient)``.

    value_fn, when given, supplies cheap value-only evaluations for line
    search probes.  step_setup(k), when given, is called at the start of
    every iteration and the objective is re-evaluated afterwards (for
    stochastic objectives whose sample changes per iteration).  Returns
    ``(x, trace)``; ``trace.status`` reports how iteration ended.
    """
    config = config or LbfgsConfig()
    x = _project(np.asarray(x0, dtype=np.float64).copy(), config.param_floor)
    n = x.size
    counter = cost_tracker if cost_tracker is not None else _CallCounter()
    track_calls = cost_tracker is None

    def eval_fg(z):
        f, g = fg(z)
        if track_calls:
            counter.f_evals += 1
            counter.r_evals += 1
        return float(f), np.asarray(g, dtype=np.float64)

    def eval_value(z):
        if value_fn is not None:
            v = float(value_fn(z))
            if track_calls:
                counter.f_evals += 1
            return v
        return eval_fg(z)[0]

    trace = CalibrationTrace()
    t_start = time.perf_counter()

    if step_setup is not None:
        step_setup(0)
    f, g = eval_fg(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        trace.status = "non_finite_abort"
        trace.append(TraceRecord(0, f, float(np.linalg.norm(g)), x.copy(),
                                 counter.f_evals, counter.r_evals, 0.0))
        return x, trace

    def log_state(k):
        trace.append(TraceRecord(
            iteration=k, loss=f, grad_norm=float(np.linalg.norm(g)),
            params=x.copy(), f_evals=counter.f_evals,
            r_evals=counter.r_evals,
            millis=(time.perf_counter() - t_start) * 1e3,
        ))

    log_state(0)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    trace.status = "max_iter"

    for k in range(1, config.max_iter + 1):
        if np.linalg.norm(g) <= config.grad_norm_tol:
            trace.status = "converged"
            break

        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
            q *= gamma
        else:
            # no curvature yet: cap the first trial step at unit length
            q /= max(1.0, float(np.linalg.norm(q)))
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q

        slope = float(g @ d)
        if slope >= 0:  # not a descent direction; fall back to steepest descent
            d = -g
            slope = float(g @ d)
        if config.max_step is not None:
            longest = float(np.max(np.abs(d)))
            if longest > config.max_step:
                d *= config.max_step / longest
                slope = float(g @ d)

        # backtracking Armijo (optionally also Wolfe curvature)
        t = 1.0
        accepted = False
        x_new = f_new = g_new = None
        for _ in range(config.max_backtracks + 1):
            x_try = _project(x + t * d, config.param_floor)
            if config.wolfe_check:
                f_try, g_try = eval_fg(x_try)
            else:
                f_try, g_try = eval_value(x_try), None
            armijo = np.isfinite(f_try) and f_try <= f + config.armijo_c1 * t * slope
            if armijo and config.wolfe_check:
                if g_try @ (x_try - x) < config.wolfe_c2 * t * slope:
                    armijo = False  # curvature too steep; shorten further
            if armijo:
                accepted = True
                x_new, f_new, g_new = x_try, f_try, g_try
                break
            t *= 0.5
        if not accepted:
            trace.status = "line_search_failure"
            break

        if g_new is None:
            f_new, g_new = eval_fg(x_new)
        if not np.isfinite(f_new) or not np.all(np.isfinite(g_new)):
            trace.status = "non_finite_abort"
            break

        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > config.memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)

        x, f, g = x_new, f_new, g_new
        if step_setup is not None and k < config.max_iter:
            # fresh sample for the next iteration: re-anchor value and gradient
            step_setup(k)
            f, g = eval_fg(x)
        log_state(k)
    else:
        if np.linalg.norm(g) <= config.grad_norm_tol:
            trace.status = "converged"

    return x, trace


def _step_seed(seed: int, iteration: int) -> int:
    ss = np.random.SeedSequence(entropy=[int(seed), int(iteration)])
    return int(ss.generate_state(1, np.uint64)[0])


class _PathCost:
    def __init__(self):
        self.f_evals = 0
        self.r_evals = 0


def calibrate(spec: mdl.MarketSpec, curve0: mdl.VolCurve, algorithm: int,
              n_mc: int, seed: int, config: LbfgsConfig = None, *,
              generator_id: str = "philox", n_threads: int = 1,
              batch_count: int = 32):
    """Fit the knot vols to the observed prices with a chosen estimator.

    Each iteration draws a fresh path set from (seed, iteration), evaluates
    the Monte-Carlo loss and the algorithm's gradient estimate on it, and
    keeps that set frozen for the whole line search.  Returns
    ``(calibrated_curve, trace)``; the trace carries exact cumulative
    path-level forward/reverse counts.
    """
    if algorithm not in _ESTIMATORS:
        raise ValueError(f"algorithm must be 1, 2 or 3, got {algorithm}")
    if algorithm in (2, 3) and n_mc < 2:
        raise ValueError(f"algorithm {algorithm} needs n_mc >= 2")
    config = config or LbfgsConfig(max_iter=40, grad_norm_tol=1e-3,
                                   param_floor=1e-4, max_step=0.1)
    overrides = {}
    if config.param_floor is None:
        overrides["param_floor"] = 1e-4
    if config.max_step is None:
        # a capped step keeps iterates out of the near-zero-vol region,
        # where out-of-the-money payoffs (and their adjoints) vanish on
        # almost every path and the sampled gradient goes dead
        overrides["max_step"] = 0.1
    if overrides:
        config = LbfgsConfig(**{**config.__dict__, **overrides})
    tape = mdl.build_model_tape(spec, curve0)
    targets = spec.prices
    grad_fn = _ESTIMATORS[algorithm]
    cost = _PathCost()
    state = {"paths": None}

    def step_setup(iteration):
        state["paths"] = rng.generate(_step_seed(seed, iteration), n_mc,
                                      tape.n_inputs, generator_id)

    def value_only(x):
        lv = mdl.loss(spec, curve0.with_vols(x), state["paths"])
        cost.f_evals += n_mc
        return lv.g

    def fg(x):
        lv = mdl.loss(spec, curve0.with_vols(x), state["paths"])
        cost.f_evals += n_mc
        g_est = grad_fn(tape, x, state["paths"], targets,
                        batch_count=batch_count, n_threads=n_threads)
        cost.f_evals += g_est.f_evals
        cost.r_evals += g_est.r_evals
        return lv.g, g_est.grad

    x_final, trace = lbfgs_minimize(fg, curve0.knot_vols, config,
                                    value_fn=value_only, cost_tracker=cost,
                                    step_setup=step_setup)
    return curve0.with_vols(x_final), trace


# -- trace CSV ----------------------------------------------------------------


def write_trace_csv(path, trace: CalibrationTrace) -> None:
    """Columns: iter, loss, grad_norm, params..., f_evals, r_evals, millis."""
    if not trace.records:
        raise ValueError("cannot serialize an empty trace")
    n_params = trace.records[0].params.size
    header = (["iter", "loss", "grad_norm"]
              + [f"param_{i + 1}" for i in range(n_params)]
              + ["f_evals", "r_evals", "millis"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in trace.records:
            w.writerow([r.iteration, repr(float(r.loss)), repr(float(r.grad_norm))]
                       + [repr(float(v)) for v in r.params]
                       + [r.f_evals, r.r_evals, repr(float(r.millis))])


def read_trace_csv(path) -> CalibrationTrace:
    trace = CalibrationTrace()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_params = len(header) - 6
        for row in reader:
            trace.append(TraceRecord(
                iteration=int(row[0]),
                loss=float(row[1]),
                grad_norm=float(row[2]),
                params=np.array([float(v) for v in row[3:3 + n_params]]),
                f_evals=int(row[3 + n_params]),
                r_evals=int(row[4 + n_params]),
                millis=float(row[5 + n_params]),
            ))
    trace.status = "loaded"
    return trace
