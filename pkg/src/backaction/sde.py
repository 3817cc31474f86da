"""Fixed-step Ito integration with reproducible per-trajectory noise.

Every trajectory ``i`` of an ensemble draws its Wiener increments from its
own stream ``NoiseStream(seed, i)``.  Ensembles are processed in blocks of a
fixed number of paths, so the results do not depend on how many worker
threads are used.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import math
from typing import Callable, Optional, Sequence

import numpy as np

#: Paths per work unit.  Fixed so that results are independent of threading.
BLOCK_PATHS = 2048
#: Time steps of noise drawn per generator call.
BLOCK_STEPS = 512


class IntegrationFailure(RuntimeError):
    """Non-finite or out-of-domain state produced by a step."""


@dataclass(frozen=True)
class NoiseStream:
    """Independent Gaussian stream identified by ``(seed, stream_index)``."""

    seed: int
    stream_index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_index,))
        return np.random.Generator(np.random.PCG64(ss))


def wiener_increments(stream: NoiseStream, dt: float, count: int,
                      channels: Optional[int] = None) -> np.ndarray:
    """`count` i.i.d. N(0, dt) increments from a fresh copy of `stream`."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if count < 1:
        raise ValueError("count must be at least 1")
    shape = (count,) if channels is None else (count, channels)
    return math.sqrt(dt) * stream.generator().standard_normal(shape)


class IncrementSource:
    """Stateful block reader over a set of noise streams.

    Each stream is consumed sequentially, so the increment sequence of a
    path does not depend on the block length used to read it.
    """

    def __init__(self, streams: Sequence[NoiseStream], channels: int, dt: float):
        self.generators = [s.generator() for s in streams]
        self.channels = channels
        self.sqrt_dt = math.sqrt(dt)

    def block(self, steps: int) -> np.ndarray:
        """Increments of shape ``(steps, paths, channels)``."""
        out = np.empty((steps, len(self.generators), self.channels))
        for j, g in enumerate(self.generators):
            out[:, j, :] = g.standard_normal((steps, self.channels))
        out *= self.sqrt_dt
        return out


@dataclass(frozen=True)
class SdeModel:
    """Ito SDE ``dx = drift(x) dt + diffusion(x) dW`` on batches of states.

    `drift` maps ``(B, d) -> (B, d)``, `diffusion` maps ``(B, d) -> (B, d, m)``
    and `constraint` (optional) projects a post-step batch back onto the
    state space.
    """

    dimension: int
    channels: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    constraint: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    def step(self, state: np.ndarray, dW: np.ndarray, dt: float) -> np.ndarray:
        return euler_maruyama_step(self, state, dW, dt)


def euler_maruyama_step(model: SdeModel, state, dW, dt: float) -> np.ndarray:
    """One Euler-Maruyama step, coefficients evaluated at the pre-step state.

    Accepts a single state ``(d,)`` with ``dW`` of shape ``(m,)`` or a batch
    ``(B, d)`` with ``dW`` of shape ``(B, m)``.
    """
    x = np.asarray(state, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    dWb = np.asarray(dW, dtype=float).reshape(xb.shape[0], model.channels)
    new = xb + model.drift(xb) * dt + np.einsum("bdm,bm->bd", model.diffusion(xb), dWb)
    if model.constraint is not None:
        new = model.constraint(new)
    if not np.all(np.isfinite(new)):
        bad = np.flatnonzero(~np.all(np.isfinite(new), axis=1))
        raise IntegrationFailure(
            f"non-finite state in {model.name or 'model'} after step of dt={dt}; "
            f"first bad path {bad[0]}, pre-step state {xb[bad[0]]}"
        )
    return new[0] if single else new


def wrap_circle(angle):
    """Reduce an angle into (-pi, pi]."""
    angle = np.asarray(angle, dtype=float)
    # wrap only out-of-range entries: the shifted form rounds small angles
    # to multiples of ulp(pi)
    outside = (angle > math.pi) | (angle <= -math.pi)
    out = np.where(outside, math.pi - np.mod(math.pi - angle, 2.0 * math.pi), angle)
    return out if out.ndim else float(out)


def wrap_interval(angle):
    """Literal periodic identification of [0, pi): pi is glued to 0."""
    angle = np.asarray(angle, dtype=float)
    out = np.mod(angle, math.pi)
    return out if out.ndim else float(out)


@dataclass
class TrajectoryPath:
    times: np.ndarray
    states: np.ndarray
    seed: int
    stream_index: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


def _step_count(horizon: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon < dt * (1 - 1e-12):
        raise ValueError(f"horizon {horizon} is shorter than dt {dt}")
    return int(round(horizon / dt))


def record_times(horizon: float, dt: float, record_every: int) -> np.ndarray:
    n = _step_count(horizon, dt)
    return dt * np.arange(0, n + 1, record_every)


def _integrate_block(step, channels, initial_batch, n_steps, dt, streams,
                     record_every, observe, callback, rows):
    source = IncrementSource(streams, channels, dt)
    x = initial_batch
    n_rec = n_steps // record_every + 1
    first = observe(x)
    rec = np.empty((len(streams), n_rec) + np.shape(first)[1:])
    rec[:, 0] = first
    if callback is not None:
        callback(0, 0.0, x, rows)
    done = 0
    while done < n_steps:
        steps = min(BLOCK_STEPS, n_steps - done)
        dWs = source.block(steps)
        for s in range(steps):
            x = step(x, dWs[s], dt)
            i = done + s + 1
            if i % record_every == 0:
                rec[:, i // record_every] = observe(x)
                if callback is not None:
                    callback(i, i * dt, x, rows)
        done += steps
    return rec, x


def run_ensemble(step, channels: int, initial, horizon: float, dt: float,
                 seed: int, n_paths: int, record_every: int = 1,
                 observe: Optional[Callable] = None, callback=None,
                 first_stream: int = 0, threads: int = 1,
                 per_path_initial: bool = False,
                 stream_of: Optional[Callable[[int], int]] = None):
    """Integrate `n_paths` independent trajectories.

    Parameters
    ----------
    step : callable ``(states, dW, dt) -> states`` or an `SdeModel`.
    initial : a single state broadcast to all paths, or with
        ``per_path_initial`` a stack of ``n_paths`` states.
    observe : maps a state batch to recorded values (default: the states).
    callback : called as ``callback(step_index, t, states, rows)`` at every
        recording step, where `rows` is the slice of path indices.
    stream_of : maps a path index to its stream index (default
        ``first_stream + i``); lets several paths share one noise stream.

    Returns
    -------
    times, records, final_states
    """
    if isinstance(step, SdeModel):
        step = step.step
    n_steps = _step_count(horizon, dt)
    if n_paths < 1:
        raise ValueError("ensemble needs at least one path")
    observe = observe or (lambda x: x)
    if stream_of is None:
        def stream_of(i):
            return first_stream + i
    init = np.asarray(initial)
    blocks = [slice(i, min(i + BLOCK_PATHS, n_paths)) for i in range(0, n_paths, BLOCK_PATHS)]

    if per_path_initial and init.shape[0] != n_paths:
        raise ValueError("per-path initial states must have n_paths rows")

    def batch_for(rows):
        if per_path_initial:
            return np.array(init[rows])
        return np.repeat(init[None, ...], rows.stop - rows.start, axis=0)

    def work(rows):
        streams = [NoiseStream(seed, stream_of(i)) for i in range(rows.start, rows.stop)]
        return _integrate_block(step, channels, batch_for(rows), n_steps, dt, streams,
                                record_every, observe, callback, rows)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(rows) for rows in blocks]
    records = np.concatenate([r[0] for r in results], axis=0)
    finals = np.concatenate([r[1] for r in results], axis=0)
    return record_times(horizon, dt, record_every), records, finals


def run_trajectory(model: SdeModel, initial, horizon: float, dt: float,
                   stream: NoiseStream, record_every: int = 1) -> TrajectoryPath:
    """Single Euler-Maruyama path recorded every `record_every` steps."""
    times, rec, _ = run_ensemble(model, model.channels, np.asarray(initial, float),
                                 horizon, dt, stream.seed, 1, record_every,
                                 first_stream=stream.stream_index)
    return TrajectoryPath(times, rec[0], stream.seed, stream.stream_index)


def run_paired_trajectories(model_a: SdeModel, model_b: SdeModel, map_ab: Callable,
                            initial, horizon: float, dt: float, stream: NoiseStream,
                            record_every: int = 1, step_b: Optional[Callable] = None):
    """Drive two models with one increment sequence.

    `initial` is a state of model A; model B starts from ``map_ab(initial)``.
    `step_b` overrides model B's stepper (e.g. a density-matrix SME step
    wrapped to act on a flattened state).
    """
    if model_a.channels != model_b.channels:
        raise ValueError(
            f"channel mismatch: {model_a.channels} vs {model_b.channels}")
    n_steps = _step_count(horizon, dt)
    dWs = wiener_increments(stream, dt, n_steps, model_a.channels)
    xa = np.asarray(initial, dtype=float)
    xb = np.asarray(map_ab(xa), dtype=float)
    stepper_b = step_b or model_b.step
    ra, rb = [xa], [xb]
    for i in range(n_steps):
        xa = model_a.step(xa, dWs[i], dt)
        xb = stepper_b(xb, dWs[i], dt)
        if (i + 1) % record_every == 0:
            ra.append(xa)
            rb.append(xb)
    times = record_times(horizon, dt, record_every)
    return (TrajectoryPath(times, np.array(ra), stream.seed, stream.stream_index),
            TrajectoryPath(times, np.array(rb), stream.seed, stream.stream_index))


def run_resampled_ensemble(step, channels: int, initial, horizon: float, dt: float,
                           seed: int, n_paths: int, importance: Callable,
                           observe: Callable, resample_every: int = 50,
                           record_every: int = 100):
    """Weighted ensemble with periodic importance resampling.

    Estimates ``E[observe(X_t)]`` without bias while keeping particles in
    regions where `importance` is large.  At each resampling time, particles
    are drawn (systematic resampling) with probability proportional to
    ``w_i * g_i`` and reweighted to ``sum(w g) / (n g_i)``.  Useful when the
    mean is carried by rare trajectories, e.g. late-time error
    probabilities of the noiseless protocol.

    Returns ``times, mean, stderr, ess``; `stderr` is the naive weighted
    estimate and ignores correlations introduced by resampling.
    """
    if isinstance(step, SdeModel):
        step = step.step
    n_steps = _step_count(horizon, dt)
    init = np.asarray(initial)
    x = np.repeat(init[None, ...], n_paths, axis=0)
    w = np.full(n_paths, 1.0 / n_paths)
    source = IncrementSource([NoiseStream(seed, i) for i in range(n_paths)], channels, dt)
    picker = NoiseStream(seed, 2**63 - 1).generator()

    means, errs, ess = [], [], []

    def record():
        f = observe(x)
        m = float(np.sum(np.sort(w * f)))
        means.append(m)
        errs.append(float(np.sqrt(np.sum(w**2 * (f - m) ** 2))))
        ess.append(float(1.0 / np.sum(w**2)))

    record()
    done = 0
    while done < n_steps:
        steps = min(BLOCK_STEPS, n_steps - done)
        dWs = source.block(steps)
        for s in range(steps):
            x = step(x, dWs[s], dt)
            i = done + s + 1
            if i % resample_every == 0:
                g = importance(x)
                p = w * g
                total = p.sum()
                if total > 0 and np.all(np.isfinite(p)):
                    cdf = np.cumsum(p / total)
                    u = (picker.random() + np.arange(n_paths)) / n_paths
                    idx = np.minimum(np.searchsorted(cdf, u), n_paths - 1)
                    x = x[idx]
                    w = total / (n_paths * g[idx])
            if i % record_every == 0:
                record()
        done += steps
    times = record_times(horizon, dt, record_every)
    return times, np.array(means), np.array(errs), np.array(ess)
