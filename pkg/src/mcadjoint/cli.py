"""Command-line harness for the estimator experiments.

Subcommands::

    variance-table   per-algorithm CSV of wall time and Var(G_k) vs N_mc
    gradient         one-row-per-algorithm gradient comparison at fixed N_mc
    calibrate        L-BFGS calibration trace CSV per (algorithm, N_mc)
    measure-speedup  empirical K_F / K_R of batched vs scalar replay

All numeric output is CSV (plotting is left to external tools) plus a
human-readable table on stdout.  Every run is reproducible from --seed at
a fixed thread count and batch width.  Flag values beat config-file
values, which beat the defaults.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimators as est
from . import model as mdl
from . import optimizer as opt
from . import rng_paths as rng

__all__ = [
    "RunConfig",
    "main",
    "cmd_variance_table",
    "cmd_gradient",
    "cmd_calibrate",
    "cmd_measure_speedup",
    "read_csv_table",
]

_DEFAULTS = {
    "spec": None,
    "alg": [1, 2, 3],
    "nmc": [100_000, 1_000_000],
    "seed": 42,
    "batch_width": 8,
    "threads": 1,
    "out": "out",
    "repeats": 3,
    "max_iter": 40,
    "generator": "philox",
}


@dataclass
class RunConfig:
    subcommand: str
    spec_path: str | None = None
    algorithms: list = field(default_factory=lambda: [1, 2, 3])
    n_mc_list: list = field(default_factory=lambda: [100_000, 1_000_000])
    seed: int = 42
    batch_width: int = 8
    threads: int = 1
    out_dir: str = "out"
    repeats: int = 3
    max_iter: int = 40
    generator_id: str = "philox"

    def __post_init__(self):
        if any(n < 2 for n in self.n_mc_list):
            raise ValueError("every N_mc must be >= 2")
        if not set(self.algorithms) <= {1, 2, 3}:
            raise ValueError("algorithms must be a subset of {1,2,3}")

    def load_market(self):
        if self.spec_path is None:
            return mdl.default_fixture()
        return mdl.load_market_file(self.spec_path)

    def ensure_out(self) -> Path:
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return out


_GRAD_FNS = {1: est.grad_est1, 2: est.grad_est2, 3: est.grad_est3}


def _timed_estimate(cfg: RunConfig, alg, tape, vols, paths, targets):
    """Median-of-repeats wall time; the estimate itself is seed-determined."""
    times = []
    estimate = None
    for _ in range(max(1, cfg.repeats)):
        t0 = time.perf_counter()
        estimate = _GRAD_FNS[alg](tape, vols, paths, targets,
                                  n_threads=cfg.threads)
        times.append(time.perf_counter() - t0)
    return estimate, statistics.median(times) * 1e6  # microseconds


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                        else v for v in row])
    return path


def read_csv_table(path):
    """Re-read any CSV the harness writes: (header, rows of floats)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, rows


def _print_table(title, header, rows):
    print(f"\n{title}")
    widths = [max(len(str(h)), 12) for h in header]
    print("  ".join(str(h).rjust(w) for h, w in zip(header, widths)))
    for row in rows:
        cells = [f"{v:.6g}" if isinstance(v, float) else str(v) for v in row]
        print("  ".join(c.rjust(w) for c, w in zip(cells, widths)))


def cmd_variance_table(cfg: RunConfig):
    """One CSV per algorithm: rows are N_mc, columns time and Var(G_k)."""
    spec, curve = cfg.load_market()
    tape = mdl.build_model_tape(spec, curve, batch_width=cfg.batch_width)
    out = cfg.ensure_out()
    m = curve.n_knots
    header = ["n_mc", "time_us"] + [f"var_g{k + 1}" for k in range(m)]
    paths_written = []
    for alg in cfg.algorithms:
        rows = []
        for n_mc in cfg.n_mc_list:
            paths = rng.generate(cfg.seed, n_mc, tape.n_inputs, cfg.generator_id)
            estimate, micros = _timed_estimate(cfg, alg, tape, curve.knot_vols,
                                               paths, spec.prices)
            rows.append([n_mc, micros] + list(estimate.variance))
        path = _write_csv(out / f"variance_alg{alg}.csv", header, rows)
        paths_written.append(path)
        _print_table(f"Algorithm {alg}: time and per-coordinate variance",
                     header, rows)
    return paths_written


def cmd_gradient(cfg: RunConfig):
    """Gradient comparison at fixed N_mc (the first --nmc value)."""
    spec, curve = cfg.load_market()
    tape = mdl.build_model_tape(spec, curve, batch_width=cfg.batch_width)
    out = cfg.ensure_out()
    n_mc = cfg.n_mc_list[0]
    paths = rng.generate(cfg.seed, n_mc, tape.n_inputs, cfg.generator_id)
    m = curve.n_knots
    header = ["algorithm", "time_us"] + [f"grad_g{k + 1}" for k in range(m)]
    rows, grads = [], {}
    for alg in cfg.algorithms:
        estimate, micros = _timed_estimate(cfg, alg, tape, curve.knot_vols,
                                           paths, spec.prices)
        grads[alg] = estimate.grad
        rows.append([alg, micros] + list(estimate.grad))
    path = _write_csv(out / "gradient.csv", header, rows)
    _print_table(f"Gradient estimates at N_mc={n_mc}", header, rows)

    if len(grads) > 1:
        algs = sorted(grads)
        spread = np.zeros(m)
        for i, a in enumerate(algs):
            for b in algs[i + 1:]:
                denom = np.maximum(np.abs(grads[a]), np.abs(grads[b]))
                spread = np.maximum(spread, np.abs(grads[a] - grads[b]) / denom)
        print("\nmax pairwise relative spread per coordinate:")
        print("  " + "  ".join(f"{s:.3e}" for s in spread))
    return path


def cmd_calibrate(cfg: RunConfig):
    """One calibration trace CSV per requested (algorithm, N_mc)."""
    spec, curve = cfg.load_market()
    out = cfg.ensure_out()
    config = opt.LbfgsConfig(max_iter=cfg.max_iter, grad_norm_tol=1e-3,
                             param_floor=1e-4)
    written = []
    for alg in cfg.algorithms:
        for n_mc in cfg.n_mc_list:
            fitted, trace = opt.calibrate(spec, curve, alg, n_mc, cfg.seed,
                                          config, generator_id=cfg.generator_id,
                                          n_threads=cfg.threads)
            path = out / f"calibrate_alg{alg}_nmc{n_mc}.csv"
            opt.write_trace_csv(path, trace)
            written.append(path)
            first, last = trace.records[0], trace.records[-1]
            print(f"alg {alg} n_mc {n_mc}: loss {first.loss:.6g} -> "
                  f"{last.loss:.6g} in {last.iteration} iterations "
                  f"({trace.status}); vols {np.round(fitted.knot_vols, 4)}")
    return written


def cmd_measure_speedup(cfg: RunConfig):
    """Wall-time comparison of scalar vs width-c batched replay."""
    spec, curve = cfg.load_market()
    tape = mdl.build_model_tape(spec, curve, batch_width=cfg.batch_width)
    out = cfg.ensure_out()
    n_mc = min(cfg.n_mc_list[0], 20_000)
    paths = rng.generate(cfg.seed, n_mc, tape.n_inputs, cfg.generator_id)
    repeats = max(cfg.repeats, 5)
    report = est.measure_correction_coefficients(
        tape, curve.knot_vols, paths, cfg.batch_width, repeats=repeats)
    header = ["width", "k_f", "k_r", "t_scalar_f_us", "t_scalar_r_us",
              "t_batched_f_us", "t_batched_r_us", "k_f_spread", "k_r_spread"]
    kf_spread = float(np.std(report.k_f_runs)) if len(report.k_f_runs) > 1 else 0.0
    kr_spread = float(np.std(report.k_r_runs)) if len(report.k_r_runs) > 1 else 0.0
    row = [report.width, report.k_f, report.k_r, report.t_scalar_f_us,
           report.t_scalar_r_us, report.t_batched_f_us, report.t_batched_r_us,
           kf_spread, kr_spread]
    path = _write_csv(out / "speedup.csv", header, [row])
    _print_table("Batched replay correction coefficients", header, [row])
    if report.degenerate:
        print("width 1 is a degenerate measurement: K_F = K_R = 1 by definition")
    else:
        print(f"measured over {report.repeats} runs; spread is the "
              "run-to-run standard deviation")
    return path


# -- argument handling --------------------------------------------------------


def _parse_int_list(text):
    return [int(float(tok)) for tok in str(text).split(",") if tok.strip()]


def _read_config_file(path):
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip().lower().replace("-", "_")] = value.strip()
    return values


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mcadjoint",
        description="Monte-Carlo adjoint gradient experiments",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, help_text in [
        ("variance-table", "variance and wall time per (algorithm, N_mc)"),
        ("gradient", "gradient comparison across algorithms at fixed N_mc"),
        ("calibrate", "calibrate the vol curve; one trace CSV per run"),
        ("measure-speedup", "measure K_F/K_R of batched vs scalar replay"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value file; flags override it")
        p.add_argument("--spec", help="market spec file (default: built-in fixture)")
        p.add_argument("--alg", help="comma-separated algorithms, e.g. 1,2,3")
        p.add_argument("--nmc", help="comma-separated path counts, e.g. 1e5,1e6")
        p.add_argument("--seed", type=int, help="base RNG seed (64-bit)")
        p.add_argument("--batch-width", type=int, dest="batch_width",
                       help="lane count c for batched replay")
        p.add_argument("--threads", type=int, help="estimator worker threads")
        p.add_argument("--out", help="output directory for CSV files")
        p.add_argument("--repeats", type=int, help="timing repetitions per row")
        p.add_argument("--generator", help="rng id: philox or pcg64")
        if name == "calibrate":
            p.add_argument("--max-iter", type=int, dest="max_iter",
                           help="optimizer iteration budget")
    return parser


def _resolve(args) -> RunConfig:
    merged = dict(_DEFAULTS)
    if getattr(args, "config", None):
        for key, value in _read_config_file(args.config).items():
            if key not in merged:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = value
    for key in merged:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return RunConfig(
        subcommand=args.subcommand,
        spec_path=merged["spec"],
        algorithms=_parse_int_list(merged["alg"]) if not isinstance(merged["alg"], list) else merged["alg"],
        n_mc_list=_parse_int_list(merged["nmc"]) if not isinstance(merged["nmc"], list) else merged["nmc"],
        seed=int(merged["seed"]),
        batch_width=int(merged["batch_width"]),
        threads=int(merged["threads"]),
        out_dir=str(merged["out"]),
        repeats=int(merged["repeats"]),
        max_iter=int(merged["max_iter"]),
        generator_id=str(merged["generator"]),
    )


_COMMANDS = {
    "variance-table": cmd_variance_table,
    "gradient": cmd_gradient,
    "calibrate": cmd_calibrate,
    "measure-speedup": cmd_measure_speedup,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        _COMMANDS[cfg.subcommand](cfg)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
