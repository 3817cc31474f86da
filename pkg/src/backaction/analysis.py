"""Ensemble statistics and the experiments built on them: asymptotic decay
rates, first-passage times, steady-state error and the optimal-strength
sweep of the perpendicular Hamiltonian protocol.

All reductions over trajectories sort before summing, so results are
bit-identical under any permutation of the paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .protocols import ControlParams, NoiseParams, ProtocolKind, noiseless_model
from .sde import run_ensemble, run_resampled_ensemble
from .sme import BlochControlledQubit, bloch_observables, run_setting_grid


class InsufficientSignal(ValueError):
    """The fit window is dominated by Monte Carlo noise."""


class HorizonExhausted(RuntimeError):
    """Too many trajectories never reached the loosest threshold."""


class NonStationary(RuntimeError):
    """First- and second-half window means disagree."""


def ordered_sum(values, axis: int = 0):
    """Sum along `axis` after sorting, so the result ignores path order."""
    return np.sum(np.sort(np.asarray(values, dtype=float), axis=axis), axis=axis)


@dataclass(frozen=True)
class EnsembleSeries:
    """Pointwise mean and standard error over an ensemble.

    With a single trajectory the standard error is NaN (no estimate).
    """

    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    count: int
    seeds: tuple = ()


@dataclass(frozen=True)
class RateFit:
    rate: float
    window: tuple
    residual: float
    r_squared: float
    points: int


@dataclass(frozen=True)
class EnsembleSpec:
    """Size and discretization of a Monte Carlo experiment.

    `initial_delta` sets a pure initial state in the xz-plane.
    """

    n_paths: int = 10_000
    horizon: float = 12.0
    dt: float = 1e-3
    seed: int = 0
    initial_delta: float = math.pi
    record_every: int = 10
    threads: int = 1
    boundary: str = "circle"

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("ensemble needs at least one path")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < self.dt:
            raise ValueError(f"horizon {self.horizon} is shorter than dt {self.dt}")


def ensemble_average_error(values, times, seeds: tuple = ()) -> EnsembleSeries:
    """Mean and standard error of ``values[path, time]``."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("empty ensemble")
    n = values.shape[0]
    mean = ordered_sum(values, axis=0) / n
    if n > 1:
        var = ordered_sum((values - mean) ** 2, axis=0) / (n - 1)
        err = np.sqrt(var / n)
    else:
        err = np.full(values.shape[1], np.nan)
    return EnsembleSeries(np.asarray(times, dtype=float), mean, err, n, seeds)


def fit_asymptotic_rate(series: EnsembleSeries, tail_fraction: float = 0.3,
                        start: Optional[float] = None,
                        stop: Optional[float] = None) -> RateFit:
    """Exponential decay rate from the tail of `series`.

    By default the window is the final `tail_fraction` of the time range;
    `start`/`stop` override it.  Points where the mean is not at least ten
    standard errors are dropped; if that removes half the window (or leaves
    fewer than three points) `InsufficientSignal` is raised.
    """
    t = np.asarray(series.times, dtype=float)
    y = np.asarray(series.mean, dtype=float)
    if not 0 < tail_fraction < 1:
        raise ValueError("tail_fraction must lie in (0, 1)")
    lo = t[0] + (1 - tail_fraction) * (t[-1] - t[0]) if start is None else start
    hi = t[-1] if stop is None else stop
    if lo < t[0] - 1e-12 or hi > t[-1] + 1e-12 or hi <= lo:
        raise ValueError(f"fit window [{lo}, {hi}] outside data range")
    window = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    err = np.nan_to_num(np.asarray(series.stderr, dtype=float), nan=0.0)
    good = window & (y > 0) & (y > 10 * err)
    if good.sum() < 3 or good.sum() < 0.5 * window.sum():
        raise InsufficientSignal(
            f"only {good.sum()} of {window.sum()} points in [{lo:.3g}, {hi:.3g}] "
            "exceed ten standard errors")
    tt, ly = t[good], np.log(y[good])
    slope, icpt = np.polyfit(tt, ly, 1)
    res = ly - (slope * tt + icpt)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(res**2))
    r2 = 1.0 if ss_tot == 0 else 1 - ss_res / ss_tot
    return RateFit(float(-slope), (float(lo), float(hi)), float(np.sqrt(ss_res / len(tt))),
                   r2, int(good.sum()))


# --- simulation drivers --------------------------------------------------------


def _initial_bloch(delta: float):
    return np.array([math.sin(delta), 0.0, math.cos(delta)])


def simulate_errors(kind: ProtocolKind, params: ControlParams,
                    noise: Optional[NoiseParams], spec: EnsembleSpec, callback=None):
    """P_e paths, shape ``(n_paths, n_times)``, and their times.

    The noiseless diffusion-gradient protocol is integrated through its exact
    one-dimensional reduction (signed angle, ``P_e = sin(x/2)**2``); every
    other case runs the qubit SME in Bloch form.  `callback` receives
    ``(step, t, P_e batch, rows)`` at recording steps.
    """
    noise = noise or NoiseParams()
    if kind in (ProtocolKind.DIFFUSION_GRADIENT,
                ProtocolKind.DIFFUSION_GRADIENT_LINEARIZED) and noise.is_zero:
        model = noiseless_model(params, spec.boundary)
        observe = _angle_error
        cb = None if callback is None else (
            lambda i, t, x, rows: callback(i, t, _angle_error(x), rows))
        times, rec, _ = run_ensemble(model, 1, np.array([spec.initial_delta]), spec.horizon,
                                     spec.dt, spec.seed, spec.n_paths, spec.record_every,
                                     observe=observe, callback=cb, threads=spec.threads)
        return times, rec
    stepper = BlochControlledQubit(kind, params, noise)
    cb = None if callback is None else (
        lambda i, t, x, rows: callback(i, t, 0.5 * (1 - x[:, 2]), rows))
    times, rec, _ = run_ensemble(stepper.step, stepper.channels,
                                 _initial_bloch(spec.initial_delta), spec.horizon, spec.dt,
                                 spec.seed, spec.n_paths, spec.record_every,
                                 observe=lambda a: bloch_observables(a)[:, 0],
                                 callback=cb, threads=spec.threads)
    return times, rec


def _angle_error(x):
    return np.sin(0.5 * x[:, 0]) ** 2


def resampled_error_series(params: ControlParams, spec: EnsembleSpec,
                           exponent: float = 0.5, resample_every: int = 50) -> EnsembleSeries:
    """Mean P_e of the noiseless diffusion-gradient protocol with importance
    resampling toward large P_e.

    The late-time mean is carried by a vanishing fraction of paths that
    linger far from the target; plain averaging of ``n`` paths stops
    resolving it once that fraction drops below ``1/n``.  Resampling with
    importance ``P_e**exponent`` keeps particles there and reweights them,
    so the estimator stays unbiased at the same path count.
    """
    model = noiseless_model(params, spec.boundary)

    def importance(x):
        return np.maximum(_angle_error(x), 1e-300) ** exponent

    times, mean, err, _ = run_resampled_ensemble(
        model, 1, np.array([spec.initial_delta]), spec.horizon, spec.dt, spec.seed,
        spec.n_paths, importance, _angle_error, resample_every, spec.record_every)
    return EnsembleSeries(times, mean, err, spec.n_paths, (spec.seed,))


# --- first passage -----------------------------------------------------------------


class FirstPassageTracker:
    """Callback that stores, per path and threshold, the first recorded time
    with ``P_e <= threshold``."""

    def __init__(self, thresholds: Sequence[float], n_paths: int):
        th = np.asarray(thresholds, dtype=float)
        if th.ndim != 1 or th.size == 0:
            raise ValueError("need at least one threshold")
        if np.any((th <= 0) | (th >= 1)):
            raise ValueError("thresholds must lie in (0, 1)")
        if np.any(np.diff(th) >= 0):
            raise ValueError("thresholds must be strictly descending")
        self.thresholds = th
        self.times = np.full((n_paths, th.size), np.nan)

    def __call__(self, step, t, errors, rows):
        block = self.times[rows]
        hit = (errors[:, None] <= self.thresholds[None, :]) & np.isnan(block)
        block[hit] = t
        self.times[rows] = block


@dataclass(frozen=True)
class FirstPassageResult:
    thresholds: np.ndarray
    mean_time: np.ndarray
    stderr: np.ndarray
    censored: np.ndarray
    horizon: float
    count: int


def summarize_passages(tracker: FirstPassageTracker, horizon: float) -> FirstPassageResult:
    """Means over paths that passed; misses are counted, not imputed.

    Raises `HorizonExhausted` if more than half the paths miss the loosest
    threshold.
    """
    times = tracker.times
    n = times.shape[0]
    passed = ~np.isnan(times)
    censored = n - passed.sum(axis=0)
    if censored[0] > 0.5 * n:
        raise HorizonExhausted(
            f"{censored[0]} of {n} paths never reached P_e <= {tracker.thresholds[0]:g} "
            f"within horizon {horizon}")
    means = np.full(times.shape[1], np.nan)
    errs = np.full(times.shape[1], np.nan)
    for j in range(times.shape[1]):
        ok = times[passed[:, j], j]
        if ok.size:
            means[j] = ordered_sum(ok) / ok.size
        if ok.size > 1:
            errs[j] = math.sqrt(ordered_sum((ok - means[j]) ** 2) / (ok.size - 1) / ok.size)
    return FirstPassageResult(tracker.thresholds, means, errs, censored, horizon, n)


def first_passage_times(kind: ProtocolKind, params: ControlParams,
                        noise: Optional[NoiseParams], thresholds: Sequence[float],
                        spec: EnsembleSpec) -> FirstPassageResult:
    """Mean first time ``P_e`` falls to each threshold, at recording resolution."""
    tracker = FirstPassageTracker(thresholds, spec.n_paths)
    simulate_errors(kind, params, noise, spec, callback=tracker)
    return summarize_passages(tracker, spec.horizon)


def passage_rate(result: FirstPassageResult, min_threshold: Optional[float] = None,
                 max_threshold: Optional[float] = None) -> RateFit:
    """Rate ``-d ln(P_e) / d <T>`` from a straight-line fit of ln(threshold)
    against mean passage time, restricted to uncensored thresholds."""
    th, mt = result.thresholds, result.mean_time
    sel = (result.censored == 0) & np.isfinite(mt)
    if min_threshold is not None:
        sel &= th >= min_threshold
    if max_threshold is not None:
        sel &= th <= max_threshold
    if sel.sum() < 3:
        raise InsufficientSignal("fewer than three uncensored thresholds to fit")
    x, y = mt[sel], np.log(th[sel])
    slope, icpt = np.polyfit(x, y, 1)
    res = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1 - float(np.sum(res**2)) / ss_tot
    return RateFit(float(-slope), (float(x.min()), float(x.max())),
                   float(np.sqrt(np.mean(res**2))), r2, int(sel.sum()))


# --- steady state ------------------------------------------------------------------


@dataclass(frozen=True)
class SteadyState:
    """Time-and-ensemble average of P_e over the sample window.

    The standard error treats each path's time average as one independent
    sample.  `first_half`/`second_half` are the half-window means used by the
    stationarity check; `log_shift` is the ensemble mean of the per-path
    change of time-averaged ``ln P_e`` between the halves.
    """

    value: float
    stderr: float
    first_half: float
    second_half: float
    half_stderr: float
    stationary: bool
    log_shift: float = 0.0
    log_shift_stderr: float = 0.0


#: Per-path log-trend bound (standard errors) of the stationarity check.
LOG_TREND_SIGMAS = 4.0


def steady_state_from_paths(times, errors, burn_in: float, window: float,
                            kappa: float = 1.0, strict: bool = True) -> SteadyState:
    """Steady-state estimate from P_e paths ``errors[path, time]``.

    Stationarity needs both: the half-window means agree within 2 combined
    standard errors, and the per-path shift of time-averaged ``ln P_e``
    between the halves is within `LOG_TREND_SIGMAS` standard errors of 0.
    The second test catches decays whose mean is carried by a few paths,
    where the standard error of the mean is as large as the mean itself.
    """
    if burn_in < 10.0 / kappa - 1e-12:
        raise ValueError(f"burn-in {burn_in} shorter than 10/kappa")
    times = np.asarray(times)
    errors = np.asarray(errors, dtype=float)
    sel = (times > burn_in + 1e-12) & (times <= burn_in + window + 1e-12)
    if sel.sum() < 2:
        raise ValueError("sample window holds fewer than two recorded times")
    idx = np.flatnonzero(sel)
    half = len(idx) // 2
    per_path = errors[:, idx].mean(axis=1)
    first = errors[:, idx[:half]].mean(axis=1)
    second = errors[:, idx[half:]].mean(axis=1)
    logs = np.log(np.maximum(errors[:, idx], 1e-300))
    shift = logs[:, half:].mean(axis=1) - logs[:, :half].mean(axis=1)
    n = errors.shape[0]

    def stat(v):
        m = ordered_sum(v) / n
        e = math.sqrt(ordered_sum((v - m) ** 2) / (n - 1) / n) if n > 1 else math.nan
        return m, e

    value, err = stat(per_path)
    m1, e1 = stat(first)
    m2, e2 = stat(second)
    ls, lse = stat(shift)
    diff_err = math.hypot(e1, e2)
    if n > 1:
        stationary = bool(abs(m1 - m2) <= 2 * diff_err and abs(ls) <= LOG_TREND_SIGMAS * lse)
    else:
        stationary = True
    result = SteadyState(value, err, m1, m2, diff_err, stationary, ls, lse)
    if strict and not stationary:
        raise NonStationary(
            f"half-window means {m1:.4g} and {m2:.4g} (combined stderr {diff_err:.3g}); "
            f"mean log shift {ls:.3g} +- {lse:.3g}")
    return result


def steady_state_error(kind: ProtocolKind, params: ControlParams, noise: NoiseParams,
                       burn_in: float, window: float, spec: EnsembleSpec,
                       strict: bool = True) -> SteadyState:
    """Steady-state ``<P_e>`` for one protocol and noise setting."""
    if burn_in < 10.0 / params.kappa - 1e-12:
        raise ValueError(f"burn-in {burn_in} shorter than 10/kappa")
    spec = replace(spec, horizon=burn_in + window)
    times, errors = simulate_errors(kind, params, noise, spec)
    return steady_state_from_paths(times, errors, burn_in, window, params.kappa, strict)


def steady_state_grid(kind: ProtocolKind, params: ControlParams, settings,
                      burn_in: float, window: float, spec: EnsembleSpec,
                      strict: bool = True) -> list:
    """`steady_state_error` for many ``(NoiseParams, k_perp)`` settings in a
    single batch with common random numbers."""
    if burn_in < 10.0 / params.kappa - 1e-12:
        raise ValueError(f"burn-in {burn_in} shorter than 10/kappa")
    times, rec = run_setting_grid(kind, params, settings, _initial_bloch(spec.initial_delta),
                                  burn_in + window, spec.dt, spec.seed, spec.n_paths,
                                  spec.record_every, spec.threads)
    return [steady_state_from_paths(times, rec[j, :, :, 0], burn_in, window,
                                    params.kappa, strict) for j in range(len(settings))]


def default_k_grid(params: ControlParams, points: int = 16) -> np.ndarray:
    """Log-spaced strengths from ``0.01 kappa`` to ``pi**2 kappa``."""
    return np.geomspace(1e-2 * params.kappa, math.pi**2 * params.kappa, points)


@dataclass(frozen=True)
class SweepResult:
    best_k: float
    best_error: float
    best_stderr: float
    table: list = field(default_factory=list)


def _pick_best(table) -> int:
    values = np.array([row[1] for row in table])
    return int(np.argmin(values))  # first minimum = smallest k on a sorted grid


def sweep_grid(noises: Sequence[NoiseParams], params: ControlParams,
               k_grid: Optional[Sequence[float]] = None,
               spec: Optional[EnsembleSpec] = None, burn_in: float = 10.0,
               window: float = 10.0, strict: bool = True) -> list:
    """`sweep_optimal_k` for several noise settings in one batch.

    Individual table rows may be non-stationary (flagged in the table);
    with `strict`, `NonStationary` is raised if the selected best row is.
    """
    grid = default_k_grid(params) if k_grid is None else np.asarray(k_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("k grid is empty")
    if np.any(grid > params.kmax * (1 + 1e-12)) or np.any(grid < 0):
        raise ValueError(f"k grid must lie in [0, {params.kmax}]")
    grid = np.sort(grid)
    spec = spec or EnsembleSpec(n_paths=2000, initial_delta=math.pi / 2)
    settings = [(noise, float(k)) for noise in noises for k in grid]
    results = steady_state_grid(ProtocolKind.HAMILTONIAN_PERPENDICULAR, params, settings,
                                burn_in, window, spec, strict=False)
    out = []
    for i in range(len(noises)):
        rows = results[i * len(grid):(i + 1) * len(grid)]
        table = [(float(k), r.value, r.stderr, r.stationary) for k, r in zip(grid, rows)]
        best = _pick_best(table)
        if strict and not table[best][3]:
            r = rows[best]
            raise NonStationary(
                f"best k={table[best][0]:.4g}: half-window means {r.first_half:.4g} and "
                f"{r.second_half:.4g} disagree")
        out.append(SweepResult(table[best][0], table[best][1], table[best][2], table))
    return out


def sweep_optimal_k(noise: NoiseParams, params: ControlParams,
                    k_grid: Optional[Sequence[float]] = None,
                    spec: Optional[EnsembleSpec] = None,
                    burn_in: float = 10.0, window: float = 10.0,
                    evaluator: Optional[Callable[[float], tuple]] = None) -> SweepResult:
    """Best constant strength of the perpendicular Hamiltonian protocol.

    Table rows are ``(k, value, stderr, stationary)``.  `evaluator(k) ->
    (value, stderr)` replaces the simulation (for tests and tables computed
    elsewhere).  Ties go to the smaller k.
    """
    if evaluator is None:
        return sweep_grid([noise], params, k_grid, spec, burn_in, window)[0]
    grid = default_k_grid(params) if k_grid is None else np.asarray(k_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("k grid is empty")
    if np.any(grid > params.kmax * (1 + 1e-12)) or np.any(grid < 0):
        raise ValueError(f"k grid must lie in [0, {params.kmax}]")
    table = []
    for k in np.sort(grid):
        v, e = evaluator(float(k))
        table.append((float(k), float(v), float(e), True))
    best = _pick_best(table)
    return SweepResult(table[best][0], table[best][1], table[best][2], table)
