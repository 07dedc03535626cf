"""European-option forward model on a piecewise-linear volatility curve.

Prices are undiscounted (zero rates throughout): the terminal asset value
at expiry T is S0 * exp(-sigma(T)^2 T / 2 + sigma(T) sqrt(T) w) with one
independent standard-normal driver w per distinct expiry, so E S(T) = S0.
The calibration loss is g = 0.5 * sum_i (E y_i - C_i)^2 over the quoted
options.

``payoffs`` and ``build_model_tape`` share the same arithmetic, operation
for operation, so the recorded tape reproduces the direct evaluation
bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import tape as tp
from .rng_paths import PathBatch

__all__ = [
    "VolCurve",
    "OptionQuote",
    "MarketSpec",
    "LossValue",
    "vol_at",
    "terminal_price",
    "payoffs",
    "loss",
    "black_scholes_call",
    "build_model_tape",
    "load_market_file",
    "save_market_file",
    "default_fixture",
]


@dataclass(frozen=True)
class VolCurve:
    """Piecewise-linear volatility curve over strictly increasing knot times."""

    knot_times: np.ndarray
    knot_vols: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.knot_times, dtype=np.float64))
        v = np.atleast_1d(np.asarray(self.knot_vols, dtype=np.float64))
        if t.size < 1:
            raise ValueError("need at least one knot")
        if t.size != v.size:
            raise ValueError("knot_times and knot_vols must have equal length")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("knot times must be strictly increasing")
        if not np.all(v > 0):
            raise ValueError("knot vols must be positive")
        object.__setattr__(self, "knot_times", t)
        object.__setattr__(self, "knot_vols", v)

    @property
    def n_knots(self) -> int:
        return self.knot_times.size

    def with_vols(self, vols) -> "VolCurve":
        return VolCurve(self.knot_times, vols)


@dataclass(frozen=True)
class OptionQuote:
    strike: float
    expiry: float
    price: float

    def __post_init__(self):
        if self.strike < 0:
            raise ValueError("strike must be >= 0")
        if self.expiry <= 0:
            raise ValueError("expiry must be > 0")
        if self.price < 0:
            raise ValueError("observed price must be >= 0")


@dataclass(frozen=True)
class MarketSpec:
    """Spot plus the quoted call options to calibrate against."""

    spot: float
    options: tuple

    def __post_init__(self):
        if self.spot <= 0:
            raise ValueError("spot must be > 0")
        opts = tuple(self.options)
        if not opts:
            raise ValueError("need at least one option")
        object.__setattr__(self, "options", opts)

    @property
    def n_options(self) -> int:
        return len(self.options)

    @property
    def strikes(self) -> np.ndarray:
        return np.array([o.strike for o in self.options])

    @property
    def expiries(self) -> np.ndarray:
        return np.array([o.expiry for o in self.options])

    @property
    def prices(self) -> np.ndarray:
        return np.array([o.price for o in self.options])

    def driver_layout(self):
        """Distinct expiries (sorted) and each option's driver column."""
        distinct = np.unique(self.expiries)
        index = {t: k for k, t in enumerate(distinct)}
        cols = np.array([index[o.expiry] for o in self.options])
        return distinct, cols

    @property
    def n_drivers(self) -> int:
        return self.driver_layout()[0].size


@dataclass(frozen=True)
class LossValue:
    g: float
    expectations: np.ndarray
    residuals: np.ndarray


def _interp_weights(knot_times: np.ndarray, t: float):
    """Bracketing knots and linear weights for time t; flat outside the grid."""
    n = knot_times.size
    if n == 1 or t <= knot_times[0]:
        return 0, 0, 1.0, 0.0
    if t >= knot_times[-1]:
        return n - 1, n - 1, 1.0, 0.0
    hi = int(np.searchsorted(knot_times, t, side="right"))
    lo = hi - 1
    w_hi = (t - knot_times[lo]) / (knot_times[hi] - knot_times[lo])
    if w_hi == 0.0:
        return lo, lo, 1.0, 0.0
    return lo, hi, 1.0 - w_hi, w_hi


def vol_at(curve: VolCurve, t: float) -> float:
    """Interpolated volatility at time t (flat extrapolation off the grid)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    lo, hi, w_lo, w_hi = _interp_weights(curve.knot_times, float(t))
    v = curve.knot_vols
    if w_hi == 0.0:
        return float(w_lo * v[lo])
    return float(w_lo * v[lo] + w_hi * v[hi])


def terminal_price(spot: float, curve: VolCurve, expiry: float, w):
    """Terminal asset value S(T) for standard-normal draw(s) w."""
    if expiry <= 0:
        raise ValueError("expiry must be > 0")
    sig = vol_at(curve, expiry)
    w = np.asarray(w, dtype=np.float64)
    z = sig * sig * (-0.5 * expiry) + sig * math.sqrt(expiry) * w
    return spot * np.exp(z)


def payoffs(spec: MarketSpec, curve: VolCurve, w):
    """Call payoffs y_i = (S(T_i) - K_i)^+ for one path or a block of paths.

    ``w`` has one column per distinct expiry (shape (n_drivers,) or
    (n_paths, n_drivers)); option i reads the column of its own expiry.
    """
    w = np.asarray(w, dtype=np.float64)
    single = w.ndim == 1
    if single:
        w = w[None, :]
    distinct, cols = spec.driver_layout()
    if w.shape[1] != distinct.size:
        raise ValueError(
            f"expected {distinct.size} drivers (one per distinct expiry), "
            f"got {w.shape[1]}"
        )
    # same arithmetic, in the same order, as the recorded tape
    s_at = {}
    for k, t in enumerate(distinct):
        lo, hi, w_lo, w_hi = _interp_weights(curve.knot_times, t)
        v = curve.knot_vols
        sig = w_lo * v[lo] if w_hi == 0.0 else w_lo * v[lo] + w_hi * v[hi]
        z = sig * sig * (-0.5 * t) + sig * math.sqrt(t) * w[:, k]
        s_at[k] = spec.spot * np.exp(z)
    out = np.empty((w.shape[0], spec.n_options), dtype=np.float64)
    for i, opt in enumerate(spec.options):
        out[:, i] = np.maximum(s_at[cols[i]] - opt.strike, 0.0)
    return out[0] if single else out


def loss(spec: MarketSpec, curve: VolCurve, paths: PathBatch) -> LossValue:
    """Monte-Carlo calibration loss over a path batch."""
    if paths.n_paths < 1:
        raise ValueError("paths must be nonempty")
    y = payoffs(spec, curve, paths.draws)
    expectations = y.mean(axis=0)
    residuals = expectations - spec.prices
    g = 0.5 * float(residuals @ residuals)
    return LossValue(g=g, expectations=expectations, residuals=residuals)


def black_scholes_call(spot: float, strike: float, sigma: float, expiry: float) -> float:
    """Zero-rate closed-form call price (test oracle)."""
    if expiry <= 0:
        raise ValueError("expiry must be > 0")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if strike == 0.0:
        return float(spot)
    if sigma == 0.0:
        return float(max(spot - strike, 0.0))
    sd = sigma * math.sqrt(expiry)
    d1 = (math.log(spot / strike) + 0.5 * sd * sd) / sd
    d2 = d1 - sd
    return float(spot * ndtr(d1) - strike * ndtr(d2))


def bs_vega(spot: float, strike: float, sigma: float, expiry: float) -> float:
    """Zero-rate Black-Scholes vega (analytic companion to the oracle)."""
    sd = sigma * math.sqrt(expiry)
    d1 = (math.log(spot / strike) + 0.5 * sd * sd) / sd
    return float(spot * math.sqrt(expiry) * math.exp(-0.5 * d1 * d1) / math.sqrt(2 * math.pi))


def build_model_tape(spec: MarketSpec, curve: VolCurve, *, batch_width: int = 8) -> tp.Tape:
    """Record the payoff program: knot vols are the parameter slots.

    The tape has M = n_knots parameters, N = n distinct expiries random
    inputs and m = n_options outputs, and replays identically to
    :func:`payoffs` at any parameter vector (knot times stay fixed).
    """
    distinct, cols = spec.driver_layout()
    knot_times = curve.knot_times

    def program(params, inputs):
        s_at = {}
        for k, t in enumerate(distinct):
            lo, hi, w_lo, w_hi = _interp_weights(knot_times, t)
            if w_hi == 0.0:
                sig = w_lo * params[lo]
            else:
                sig = w_lo * params[lo] + w_hi * params[hi]
            z = sig * sig * (-0.5 * t) + sig * math.sqrt(t) * inputs[k]
            s_at[k] = spec.spot * tp.exp(z)
        return [tp.max0(s_at[cols[i]] - opt.strike)
                for i, opt in enumerate(spec.options)]

    return tp.record(program, n_params=curve.n_knots, n_inputs=distinct.size,
                     batch_width=batch_width)


# -- plain-text market configuration -----------------------------------------


def load_market_file(path) -> tuple[MarketSpec, VolCurve]:
    """Read a key-value market file: spot, option and knot lines.

    Schema (one entry per line, '#' starts a comment)::

        spot = 100.0
        option = <strike> <expiry_years> <observed_price>
        knot = <time_years> <vol>
    """
    spot = None
    options = []
    knots = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip().lower()
            fields = value.split()
            if key == "spot":
                spot = float(fields[0])
            elif key == "option":
                if len(fields) != 3:
                    raise ValueError(
                        f"{path}:{lineno}: option needs strike, expiry, price"
                    )
                options.append(OptionQuote(*map(float, fields)))
            elif key == "knot":
                if len(fields) != 2:
                    raise ValueError(f"{path}:{lineno}: knot needs time, vol")
                knots.append((float(fields[0]), float(fields[1])))
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    if spot is None:
        raise ValueError(f"{path}: missing 'spot'")
    if not options:
        raise ValueError(f"{path}: no option lines")
    if not knots:
        raise ValueError(f"{path}: no knot lines")
    knots.sort()
    curve = VolCurve([t for t, _ in knots], [v for _, v in knots])
    return MarketSpec(spot=spot, options=tuple(options)), curve


def save_market_file(path, spec: MarketSpec, curve: VolCurve) -> None:
    with open(path, "w") as fh:
        fh.write(f"spot = {float(spec.spot)!r}\n")
        for t, v in zip(curve.knot_times, curve.knot_vols):
            fh.write(f"knot = {float(t)!r} {float(v)!r}\n")
        for o in spec.options:
            fh.write(f"option = {float(o.strike)!r} {float(o.expiry)!r} "
                     f"{float(o.price)!r}\n")


def default_fixture(start_vol: float = 0.4, reference_vol: float = 0.2):
    """Desk-scale five-option fixture.

    Strikes 100..120 against spot 100, expiries 1..5y, knots at the
    expiries.  Observed prices are closed-form prices under a flat
    reference curve; the returned curve is a flat starting guess.
    """
    spot = 100.0
    strikes = [100.0, 105.0, 110.0, 115.0, 120.0]
    expiries = [1.0, 2.0, 3.0, 4.0, 5.0]
    options = tuple(
        OptionQuote(k, t, black_scholes_call(spot, k, reference_vol, t))
        for k, t in zip(strikes, expiries)
    )
    spec = MarketSpec(spot=spot, options=options)
    curve = VolCurve(expiries, [start_vol] * len(expiries))
    return spec, curve
