"""Monte-Carlo adjoint estimators for gradients of g = 0.5 sum (Ey_i - C_i)^2.

Three estimators, all driven by the same tape replay engine:

* algorithm 1: two passes. Pass one averages the outputs to get Ey.  Pass
  two sweeps every path in reverse seeded with the fixed residuals
  Ey_i - C_i (and recomputes the forward values it needs, so forward work
  is paid twice).
* algorithm 2: one pass.  Path j is swept with the residuals of the
  *previous* path, y_i(w_{j-1}) - C_i; path independence keeps the
  estimator unbiased.  Path 1 is forward-only.
* algorithm 3: like algorithm 2, but the lagged single-path output is
  replaced by the running mean S_i over all earlier paths, which removes
  most of the extra variance while keeping the single-pass cost.

Every estimator materializes the per-path contribution matrix (one row
per reversed path), takes its mean for the gradient, estimates the
per-coordinate variance of the estimator from the same rows, and carries
exact scalar-equivalent forward/reverse evaluation counts that are checked
against their closed forms on every run.

Paths are processed in fixed-size blocks (``BLOCK_PATHS``) with lane-wise
vectorized replay; lane determinism of the engine makes the result
independent of the blocking and of the worker-thread count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .rng_paths import PathBatch, chunks
from .tape import ReplayCounters, Tape

__all__ = [
    "GradientEstimate",
    "RunningMean",
    "grad_est1",
    "grad_est2",
    "grad_est3",
    "grad_est_batched",
    "estimate_variance",
    "measure_correction_coefficients",
    "SpeedupReport",
    "BLOCK_PATHS",
]

# internal vectorization width (paths per replay block); fixed so that
# results are reproducible for a given seed regardless of thread count
BLOCK_PATHS = 65536


@dataclass
class GradientEstimate:
    """A gradient estimate with its variance and exact evaluation counts."""

    grad: np.ndarray
    variance: np.ndarray
    n_paths: int
    f_evals: int
    r_evals: int
    algorithm: int
    millis: float = 0.0
    k_f: float | None = None
    k_r: float | None = None


class RunningMean:
    """Exact running mean of the output vector over consumed paths.

    Keeps the raw left-to-right sum, so the mean after n updates is
    (y_1 + ... + y_n) / n in consumption order.
    """

    def __init__(self, n_outputs: int):
        self.sums = np.zeros(n_outputs, dtype=np.float64)
        self.count = 0

    def update(self, y_row) -> None:
        self.sums += y_row
        self.count += 1

    def update_block(self, y_block) -> None:
        y_block = np.atleast_2d(y_block)
        for row in y_block:
            self.sums += row
        self.count += len(y_block)

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("running mean is empty")
        return self.sums / self.count


def estimate_variance(per_path_terms, algorithm: int, batch_count: int = 32) -> np.ndarray:
    """Per-coordinate variance of the estimator from its per-path terms.

    Algorithm 1 terms are i.i.d., so the variance of their mean is the
    sample variance over the term count.  Algorithms 2 and 3 carry lag-1
    dependence between consecutive terms; a non-overlapping batch-means
    estimate absorbs it.
    """
    terms = _as_term_matrix(per_path_terms)
    n = terms.shape[0]
    if algorithm == 1:
        if n < 2:
            return np.full(terms.shape[1], np.nan)
        return terms.var(axis=0, ddof=1) / n
    if algorithm in (2, 3):
        if n < 16 * batch_count:
            raise ValueError(
                f"too few paths for the batch count: {n} terms cannot fill "
                f"{batch_count} batches of at least 16"
            )
        size = n // batch_count
        means = terms[: batch_count * size].reshape(batch_count, size, -1).mean(axis=1)
        return means.var(axis=0, ddof=1) / batch_count
    raise ValueError(f"unknown algorithm {algorithm}")


def _as_term_matrix(per_path_terms) -> np.ndarray:
    if isinstance(per_path_terms, np.ndarray):
        terms = per_path_terms
    else:
        blocks = [np.atleast_2d(b) for b in per_path_terms]
        terms = np.vstack(blocks)
    terms = np.atleast_2d(np.asarray(terms, dtype=np.float64))
    return terms


def _variance_or_nan(terms, algorithm, batch_count) -> np.ndarray:
    """Internal: cap the batch count at small n instead of failing the run."""
    if algorithm == 1:
        return estimate_variance(terms, 1)
    n = terms.shape[0]
    capped = min(batch_count, n // 16)
    if capped < 2:
        return np.full(terms.shape[1], np.nan)
    return estimate_variance(terms, algorithm, capped)


# -- block scheduling ---------------------------------------------------------


def _block_ranges(n_paths: int):
    return [(lo, min(lo + BLOCK_PATHS, n_paths))
            for lo in range(0, n_paths, BLOCK_PATHS)]


def _map_blocks(fn, jobs, n_threads: int):
    """Run fn over jobs, possibly in a thread pool. Results land in slots."""
    if n_threads <= 1 or len(jobs) <= 1:
        for job in jobs:
            fn(job)
        return
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        list(pool.map(fn, jobs))


def _merge_counters(parts) -> ReplayCounters:
    total = ReplayCounters()
    for c in parts:
        total.f_evals += c.f_evals
        total.r_evals += c.r_evals
        total.f_batch_calls += c.f_batch_calls
        total.r_batch_calls += c.r_batch_calls
    return total


def _check_inputs(tape: Tape, params, paths: PathBatch, targets) -> tuple:
    params = np.asarray(params, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (tape.n_outputs,):
        raise ValueError(
            f"expected {tape.n_outputs} targets, got shape {targets.shape}"
        )
    if paths.n_inputs != tape.n_inputs:
        raise ValueError(
            f"path batch has {paths.n_inputs} inputs per path, tape expects "
            f"{tape.n_inputs}"
        )
    return params, targets


def _check_counts(counters: ReplayCounters, f_expected: int, r_expected: int) -> None:
    if counters.f_evals != f_expected or counters.r_evals != r_expected:
        raise AssertionError(
            f"evaluation accounting drifted: counted F={counters.f_evals} "
            f"R={counters.r_evals}, expected F={f_expected} R={r_expected}"
        )


# -- algorithm 1: two-pass, exact residual seeds ------------------------------


def grad_est1(tape: Tape, params, paths: PathBatch, targets, *,
              cache_forward: bool = False, batch_count: int = 32,
              n_threads: int = 1) -> GradientEstimate:
    """Two-pass estimator with fixed residual seeds Ey_i - C_i.

    By default the reverse pass replays the forward values it needs, so
    f_evals = 2 N and r_evals = N.  With ``cache_forward`` the pass-one
    value buffers are kept (memory: n_nodes doubles per path) and
    f_evals = N.
    """
    t0 = time.perf_counter()
    params, targets = _check_inputs(tape, params, paths, targets)
    n = paths.n_paths
    if n < 1:
        raise ValueError("paths must be nonempty")
    ranges = _block_ranges(n)
    y = np.empty((n, tape.n_outputs), dtype=np.float64)
    counters = [ReplayCounters() for _ in ranges]
    buffers: list = [None] * len(ranges)

    def fwd(i):
        lo, hi = ranges[i]
        out, buf = tape.replay_forward(params, paths.draws[lo:hi],
                                       counters=counters[i])
        y[lo:hi] = out
        if cache_forward:
            buffers[i] = buf

    _map_blocks(fwd, range(len(ranges)), n_threads)

    ey = y.mean(axis=0)
    lam = ey - targets
    terms = np.empty((n, tape.n_params), dtype=np.float64)

    def rev(i):
        lo, hi = ranges[i]
        if cache_forward:
            buf = buffers[i]
        else:
            _, buf = tape.replay_forward(params, paths.draws[lo:hi],
                                         counters=counters[i])
        seeds = np.broadcast_to(lam, (hi - lo, tape.n_outputs))
        terms[lo:hi] = tape.replay_reverse(buf, seeds, counters=counters[i])

    _map_blocks(rev, range(len(ranges)), n_threads)

    total = _merge_counters(counters)
    _check_counts(total, n if cache_forward else 2 * n, n)
    return GradientEstimate(
        grad=terms.mean(axis=0),
        variance=_variance_or_nan(terms, 1, batch_count),
        n_paths=n,
        f_evals=total.f_evals,
        r_evals=total.r_evals,
        algorithm=1,
        millis=(time.perf_counter() - t0) * 1e3,
    )


# -- algorithms 2 and 3: single pass with lagged seeds ------------------------


def _grad_lagged(algorithm: int, tape: Tape, params, paths: PathBatch, targets,
                 batch_count: int, n_threads: int) -> GradientEstimate:
    t0 = time.perf_counter()
    params, targets = _check_inputs(tape, params, paths, targets)
    n = paths.n_paths
    if n < 2:
        raise ValueError(
            f"algorithm {algorithm} needs at least 2 paths: each reverse "
            "sweep is seeded from an earlier path"
        )
    ranges = _block_ranges(n)
    counters = [ReplayCounters() for _ in ranges]
    terms = np.empty((n - 1, tape.n_params), dtype=np.float64)

    carry_y = np.empty(tape.n_outputs)      # y of the path before the block
    carry_sum = np.zeros(tape.n_outputs)    # sum of y over paths before block
    window = max(1, n_threads)

    for w_start in range(0, len(ranges), window):
        idxs = range(w_start, min(w_start + window, len(ranges)))
        fwd_out: dict = {}

        def fwd(i):
            lo, hi = ranges[i]
            fwd_out[i] = tape.replay_forward(params, paths.draws[lo:hi],
                                             counters=counters[i])

        _map_blocks(fwd, idxs, n_threads)

        jobs = []
        for i in idxs:
            lo, hi = ranges[i]
            y_blk, buf = fwd_out[i]
            if algorithm == 2:
                lagged = np.empty_like(y_blk)
                lagged[1:] = y_blk[:-1]
                if lo == 0:
                    lagged = lagged[1:]     # path 0 has no predecessor
                else:
                    lagged[0] = carry_y
                carry_y = y_blk[-1]
            else:
                csum = np.cumsum(y_blk, axis=0)
                pre = np.empty_like(y_blk)
                pre[0] = carry_sum
                pre[1:] = carry_sum + csum[:-1]
                counts = np.arange(lo, hi, dtype=np.float64)[:, None]
                if lo == 0:
                    lagged = pre[1:] / counts[1:]
                else:
                    lagged = pre / counts
                carry_sum = carry_sum + csum[-1]
            seeds = lagged - targets
            # buffer lanes line up with seed rows; drop the unseeded path 0
            sweep_buf = buf[:, 1:] if lo == 0 else buf
            row_lo = max(lo, 1) - 1
            jobs.append((i, sweep_buf, seeds, row_lo))

        def rev(job):
            i, sweep_buf, seeds, row_lo = job
            out = tape.replay_reverse(sweep_buf, seeds, counters=counters[i])
            terms[row_lo: row_lo + len(seeds)] = out

        _map_blocks(rev, jobs, n_threads)

    total = _merge_counters(counters)
    _check_counts(total, n, n - 1)
    return GradientEstimate(
        grad=terms.mean(axis=0),
        variance=_variance_or_nan(terms, algorithm, batch_count),
        n_paths=n,
        f_evals=total.f_evals,
        r_evals=total.r_evals,
        algorithm=algorithm,
        millis=(time.perf_counter() - t0) * 1e3,
    )


def grad_est2(tape: Tape, params, paths: PathBatch, targets, *,
              batch_count: int = 32, n_threads: int = 1) -> GradientEstimate:
    """Single-pass estimator seeded with the previous path's residuals."""
    return _grad_lagged(2, tape, params, paths, targets, batch_count, n_threads)


def grad_est3(tape: Tape, params, paths: PathBatch, targets, *,
              batch_count: int = 32, n_threads: int = 1) -> GradientEstimate:
    """Single-pass estimator seeded with running-mean residuals."""
    return _grad_lagged(3, tape, params, paths, targets, batch_count, n_threads)


# -- explicit width-c batched variants ----------------------------------------


def grad_est_batched(algorithm: int, tape: Tape, params, paths: PathBatch,
                     targets, width: int | None = None, *,
                     batch_count: int = 32, measure_k: bool = False) -> GradientEstimate:
    """Run an estimator through the width-c batched replay interface.

    Chunks of c paths go through one batched forward (and one batched
    reverse) application each.  For the lagged algorithms the seed source
    is rescheduled to chunk granularity: lane l of chunk t is seeded from
    lane l of chunk t-1 (algorithm 2) or from the running mean over all
    chunks before t (algorithm 3); chunk 0 is forward-only, so those
    algorithms reverse n_paths - c paths.  At width 1 every estimate is
    bit-identical to its scalar counterpart.
    """
    t0 = time.perf_counter()
    if width is None:
        width = tape.batch_width
    elif width != tape.batch_width:
        tape = tape.with_batch_width(width)
    params, targets = _check_inputs(tape, params, paths, targets)
    n = paths.n_paths
    counters = ReplayCounters()

    if algorithm == 1:
        if n < 1:
            raise ValueError("paths must be nonempty")
        y = np.empty((n, tape.n_outputs))
        for ch in chunks(paths, width):
            out = tape.forward_batch(params, ch.block, n_active=ch.n_active,
                                     counters=counters)
            y[ch.start: ch.start + ch.n_active] = out[: ch.n_active]
        lam = y.mean(axis=0) - targets
        seeds = np.broadcast_to(lam, (width, tape.n_outputs))
        terms = np.empty((n, tape.n_params))
        for ch in chunks(paths, width):
            adj = tape.reverse_batch(params, ch.block, seeds,
                                     n_active=ch.n_active, counters=counters)
            terms[ch.start: ch.start + ch.n_active] = adj[: ch.n_active]
        _check_counts(counters, 2 * n, n)
    elif algorithm in (2, 3):
        if n <= width:
            raise ValueError(
                f"algorithm {algorithm} at width {width} needs more than "
                f"{width} paths: chunk 0 is forward-only"
            )
        terms = np.empty((n - width, tape.n_params))
        rm = RunningMean(tape.n_outputs)
        prev_y = None
        buf = tape.alloc_buffer(width)
        for ch in chunks(paths, width):
            out = tape.forward_batch(params, ch.block, buffer=buf,
                                     n_active=ch.n_active, counters=counters)
            if ch.start > 0:
                if algorithm == 2:
                    lagged = prev_y
                else:
                    lagged = np.broadcast_to(rm.mean, (width, tape.n_outputs))
                adj = tape.reverse_batch(params, ch.block, lagged - targets,
                                         buffer=buf, n_active=ch.n_active,
                                         counters=counters)
                terms[ch.start - width: ch.start - width + ch.n_active] = \
                    adj[: ch.n_active]
            if algorithm == 3:
                rm.update_block(out[: ch.n_active])
            prev_y = out
        _check_counts(counters, n, n - width)
    else:
        raise ValueError(f"unknown algorithm {algorithm}")

    est = GradientEstimate(
        grad=terms.mean(axis=0),
        variance=_variance_or_nan(terms, algorithm, batch_count),
        n_paths=n,
        f_evals=counters.f_evals,
        r_evals=counters.r_evals,
        algorithm=algorithm,
        millis=(time.perf_counter() - t0) * 1e3,
    )
    if measure_k:
        report = measure_correction_coefficients(tape, params, paths, width,
                                                 repeats=1)
        est.k_f, est.k_r = report.k_f, report.k_r
    return est


@dataclass
class SpeedupReport:
    """Empirical batched-vs-scalar replay cost comparison."""

    width: int
    k_f: float
    k_r: float
    t_scalar_f_us: float    # per-path scalar forward, microseconds
    t_scalar_r_us: float
    t_batched_f_us: float   # per-path batched forward, microseconds
    t_batched_r_us: float
    repeats: int
    k_f_runs: list = field(default_factory=list)
    k_r_runs: list = field(default_factory=list)
    degenerate: bool = False


def measure_correction_coefficients(tape: Tape, params, paths: PathBatch,
                                    width: int | None = None, *,
                                    repeats: int = 3,
                                    scalar_sample: int = 256) -> SpeedupReport:
    """Measure K_F and K_R: width * (batched per-path time) / (scalar per-path time).

    A perfectly lane-parallel replay would give 1.  Both are measured, never
    assumed; at width 1 the coefficients are 1 by definition and no timing
    is attempted.
    """
    if width is None:
        width = tape.batch_width
    elif width != tape.batch_width:
        tape = tape.with_batch_width(width)
    params = np.asarray(params, dtype=np.float64)
    if width == 1:
        return SpeedupReport(width=1, k_f=1.0, k_r=1.0,
                             t_scalar_f_us=0.0, t_scalar_r_us=0.0,
                             t_batched_f_us=0.0, t_batched_r_us=0.0,
                             repeats=0, degenerate=True)

    n_scalar = min(scalar_sample, paths.n_paths)
    unit_seed = np.ones(tape.n_outputs)
    full = [ch for ch in chunks(paths, width) if ch.n_active == width]
    if not full:
        raise ValueError("need at least one full-width chunk to measure")
    seeds = np.ones((width, tape.n_outputs))

    k_f_runs, k_r_runs = [], []
    tf_s = tr_s = tf_v = tr_v = 0.0
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        for j in range(n_scalar):
            tape.forward(params, paths.draws[j])
        t1 = time.perf_counter()
        for j in range(n_scalar):
            tape.reverse(params, paths.draws[j], unit_seed)
        t2 = time.perf_counter()
        tf_s = (t1 - t0) / n_scalar
        tr_s = (t2 - t1) / n_scalar - tf_s  # reverse() replays the forward

        buf = tape.alloc_buffer(width)
        t3 = time.perf_counter()
        for ch in full:
            tape.forward_batch(params, ch.block, buffer=buf)
        t4 = time.perf_counter()
        for ch in full:
            tape.reverse_batch(params, ch.block, seeds, buffer=buf)
        t5 = time.perf_counter()
        n_batched = len(full) * width
        tf_v = (t4 - t3) / n_batched
        tr_v = (t5 - t4) / n_batched

        k_f_runs.append(width * tf_v / tf_s)
        k_r_runs.append(width * tr_v / max(tr_s, 1e-12))

    return SpeedupReport(
        width=width,
        k_f=float(np.median(k_f_runs)),
        k_r=float(np.median(k_r_runs)),
        t_scalar_f_us=tf_s * 1e6,
        t_scalar_r_us=tr_s * 1e6,
        t_batched_f_us=tf_v * 1e6,
        t_batched_r_us=tr_v * 1e6,
        repeats=max(1, repeats),
        k_f_runs=k_f_runs,
        k_r_runs=k_r_runs,
    )
