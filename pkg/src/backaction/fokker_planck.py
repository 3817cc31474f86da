"""One-dimensional Fokker-Planck solver used as a deterministic oracle.

Solves ``dP/dt = -dJ/dx`` with the Ito current

    J = (v - D'/2) P - (D/2) P' = v P - (1/2) d(D P)/dx

by a conservative finite-volume scheme.  Face fluxes are
``J_{i+1/2} = v_f (P_i + P_{i+1})/2 - (D_{i+1} P_{i+1} - D_i P_i) / (2h)``,
so the operator is an M-matrix when diffusion dominates and total
probability changes only through absorbing walls.

Two charts are provided for the noiseless diffusion-gradient model
``d delta = sqrt(8 kappa) delta dW``:

* `circle_problem`: the signed angle on (-pi, pi] with ``D = 8 kappa x**2``
  on a uniform periodic grid;
* `log_chart_problem`: ``y = ln(delta)``, where the model becomes Brownian
  motion with constant drift ``-4 kappa`` and diffusion ``8 kappa``.  A node
  at ``x = 0`` of a uniform grid acts as an artificial trap, so late-time
  tails converge only logarithmically in M there; the log chart resolves
  them at modest M.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu


class StabilityViolation(ValueError):
    """Explicit step exceeds the diffusive stability bound."""


class NoConvergence(RuntimeError):
    """Asymptotic decay rate did not settle within the horizon."""


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid of M nodes.

    Periodic grids have nodes ``lower + i h`` with ``h = (upper - lower)/M``.
    Bounded grids are cell-centred, ``lower + (i + 1/2) h``, with walls at
    `lower` and `upper`.
    """

    lower: float
    upper: float
    size: int
    periodic: bool = True

    def __post_init__(self):
        if self.size < 64:
            raise ValueError(f"grid needs at least 64 nodes, got {self.size}")
        if not self.upper > self.lower:
            raise ValueError("upper bound must exceed lower bound")

    @property
    def h(self) -> float:
        return (self.upper - self.lower) / self.size

    @property
    def nodes(self) -> np.ndarray:
        i = np.arange(self.size)
        offset = 0.0 if self.periodic else 0.5
        return self.lower + (i + offset) * self.h

    @property
    def length(self) -> float:
        return self.upper - self.lower


@dataclass
class DensityField:
    """Node values of a probability density on `grid`.

    Normalization ``sum(P) h = 1`` is checked to 1e-8 unless
    ``allow_defect`` (mass lost through absorbing walls).
    """

    grid: Grid1D
    values: np.ndarray
    allow_defect: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise GridMismatch("density values do not match the grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density has non-finite values")
        if not self.allow_defect and abs(self.mass - 1.0) > 1e-8:
            raise ValueError(f"density mass {self.mass} differs from 1")

    @property
    def mass(self) -> float:
        return float(np.sum(self.values) * self.grid.h)

    def integrate(self, weight) -> float:
        return float(np.sum(np.asarray(weight) * self.values) * self.grid.h)

    @classmethod
    def gaussian(cls, grid: Grid1D, center: float, width: float) -> "DensityField":
        """Normalized Gaussian bump, wrapped on periodic grids and folded
        back at reflecting walls otherwise."""
        x = grid.nodes
        if grid.periodic:
            d = np.mod(x - center + grid.length / 2, grid.length) - grid.length / 2
            p = np.exp(-0.5 * (d / width) ** 2)
        else:
            p = np.exp(-0.5 * ((x - center) / width) ** 2)
            p += np.exp(-0.5 * ((2 * grid.upper - center - x) / width) ** 2)
            p += np.exp(-0.5 * ((2 * grid.lower - center - x) / width) ** 2)
        return cls(grid, p / (p.sum() * grid.h))


def _node_field(grid: Grid1D, f) -> np.ndarray:
    if callable(f):
        f = f(grid.nodes)
    arr = np.broadcast_to(np.asarray(f, dtype=float), (grid.size,)).copy()
    return arr


def probability_current(P: DensityField, v, D) -> np.ndarray:
    """``J = (v - D'/2) P - (D/2) P'`` at the nodes, central differences.

    `v` and `D` are node arrays (or callables of x) on the grid of `P`.
    """
    grid = P.grid
    v = np.asarray(v(grid.nodes) if callable(v) else v, dtype=float)
    D = np.asarray(D(grid.nodes) if callable(D) else D, dtype=float)
    if v.shape not in ((), (grid.size,)) or D.shape not in ((), (grid.size,)):
        raise GridMismatch("fields must live on the density's grid")
    D = np.broadcast_to(D, (grid.size,))
    p = P.values
    if grid.periodic:
        def grad(f):
            return (np.roll(f, -1) - np.roll(f, 1)) / (2 * grid.h)
    else:
        def grad(f):
            return np.gradient(f, grid.h)
    return (v - 0.5 * grad(D)) * p - 0.5 * D * grad(p)


def fp_operator(grid: Grid1D, v, D, lower: str = "reflecting",
                upper: str = "reflecting") -> sparse.csr_matrix:
    """Sparse matrix A with ``dP/dt = A P``.

    `lower` and `upper` select wall conditions on bounded grids:
    ``"reflecting"`` (zero flux) or ``"absorbing"`` (P = 0 at the wall).
    They are ignored on periodic grids.
    """
    m, h = grid.size, grid.h
    vn = _node_field(grid, v)
    dn = _node_field(grid, D)
    if np.any(dn < 0):
        raise ValueError("diffusion must be non-negative")
    rows, cols, vals = [], [], []

    def add_face(left, right, vf):
        # J = a P_left + b P_right flows from `left` to `right`.
        a = 0.5 * vf + dn[left] / (2 * h)
        b = 0.5 * vf - dn[right] / (2 * h)
        for node, sign in ((left, -1.0), (right, 1.0)):
            rows.extend([node, node])
            cols.extend([left, right])
            vals.extend([sign * a / h, sign * b / h])

    for i in range(m - 1):
        add_face(i, i + 1, 0.5 * (vn[i] + vn[i + 1]))
    if grid.periodic:
        add_face(m - 1, 0, 0.5 * (vn[-1] + vn[0]))
    else:
        for wall, node, outward in ((lower, 0, -1.0), (upper, m - 1, 1.0)):
            if wall == "reflecting":
                continue
            if wall != "absorbing":
                raise ValueError(f"unknown boundary {wall!r}")
            # Mirror ghost -P at distance h: outward flux D P / h.
            rows.append(node)
            cols.append(node)
            vals.append(-dn[node] / h**2)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(m, m))


def stability_bound(grid: Grid1D, D) -> float:
    """Largest explicit step ``h**2 / (2 max D)``."""
    dmax = float(np.max(_node_field(grid, D)))
    return math.inf if dmax == 0 else grid.h**2 / (2 * dmax)


class _Stepper:
    def __init__(self, op, dt, method):
        self.op, self.dt, self.method = op, dt, method
        eye = sparse.identity(op.shape[0], format="csc")
        if method == "implicit":
            self.lu = splu((eye - dt * op).tocsc())
        elif method == "crank-nicolson":
            self.lu = splu((eye - 0.5 * dt * op).tocsc())
            self.rhs = (eye + 0.5 * dt * op).tocsr()
        elif method != "explicit":
            raise ValueError(f"unknown method {method!r}")

    def __call__(self, p):
        if self.method == "explicit":
            return p + self.dt * (self.op @ p)
        if self.method == "implicit":
            return self.lu.solve(p)
        return self.lu.solve(self.rhs @ p)


def _plan(grid, D, horizon, dt, method):
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    bound = stability_bound(grid, D)
    if dt is None:
        dt = 0.9 * bound if method == "explicit" else 1e-3
        if not math.isfinite(dt):
            dt = max(horizon, 1e-3) / 100
    if dt <= 0:
        raise ValueError("dt must be positive")
    if method == "explicit" and dt > bound * (1 + 1e-12):
        raise StabilityViolation(
            f"dt={dt:.3g} exceeds h^2/(2 max D)={bound:.3g}; refine dt or use method='implicit'")
    n = max(int(math.ceil(horizon / dt - 1e-9)), 0)
    return n, (horizon / n if n else dt)


def fp_evolve(P0: DensityField, v, D, horizon: float, dt: Optional[float] = None,
              method: str = "explicit", lower: str = "reflecting",
              upper: str = "reflecting",
              callback: Optional[Callable[[float, np.ndarray], None]] = None) -> DensityField:
    """Evolve `P0` to time `horizon`.

    ``method="explicit"`` is forward Euler and enforces
    ``dt <= h**2 / (2 max D)``; ``"implicit"`` (backward Euler) and
    ``"crank-nicolson"`` are unconditionally stable.  The step is shrunk so
    that an integer number of steps lands on `horizon`.
    """
    grid = P0.grid
    n, dt = _plan(grid, D, horizon, dt, method)
    step = _Stepper(fp_operator(grid, v, D, lower, upper), dt, method)
    p = P0.values.copy()
    for i in range(n):
        p = step(p)
        if callback is not None:
            callback((i + 1) * dt, p)
    absorbing = not grid.periodic and "absorbing" in (lower, upper)
    return DensityField(grid, p, allow_defect=absorbing)


def weighted_series(P0: DensityField, v, D, weight, horizon: float, dt: float,
                    method: str = "implicit", lower: str = "reflecting",
                    upper: str = "reflecting", record_every: int = 1):
    """Times and ``integral(weight * P)`` along an evolution."""
    w = _node_field(P0.grid, weight)
    times, values = [0.0], [P0.integrate(w)]
    counter = [0]

    def rec(t, p):
        counter[0] += 1
        if counter[0] % record_every == 0:
            times.append(t)
            values.append(float(np.sum(w * p) * P0.grid.h))

    fp_evolve(P0, v, D, horizon, dt, method, lower, upper, callback=rec)
    return np.array(times), np.array(values)


@dataclass(frozen=True)
class FpProblem:
    """Grid, coefficients, observable weight and walls of one FP setup."""

    grid: Grid1D
    v: np.ndarray
    D: np.ndarray
    weight: np.ndarray
    lower: str = "reflecting"
    upper: str = "reflecting"

    def initial(self, center: float, width_cells: float = 3.0) -> DensityField:
        return DensityField.gaussian(self.grid, center, width_cells * self.grid.h)

    def series(self, P0: DensityField, horizon: float, dt: float,
               method: str = "implicit", record_every: int = 1):
        return weighted_series(P0, self.v, self.D, self.weight, horizon, dt, method,
                               self.lower, self.upper, record_every)


def circle_problem(kappa: float = 1.0, size: int = 512) -> FpProblem:
    """Signed angle on the periodic grid (-pi, pi], ``D = 8 kappa x**2``."""
    grid = Grid1D(-math.pi, math.pi, size, periodic=True)
    x = grid.nodes
    return FpProblem(grid, np.zeros(size), 8 * kappa * x**2, 0.5 * (1 - np.cos(x)))


def log_chart_problem(kappa: float = 1.0, size: int = 2400, depth: float = 60.0,
                      boundary: str = "circle") -> FpProblem:
    """``y = ln(delta)`` on ``[ln(pi) - depth, ln(pi)]``.

    ``boundary="circle"`` reflects at ``delta = pi`` (the signed-angle circle
    folded by symmetry); ``"interval"`` absorbs there, because gluing pi to 0
    sends that probability to the target where it stays.  Probability that
    leaves through the deep end has ``delta < exp(-depth)`` and is dropped.
    """
    top = math.log(math.pi)
    grid = Grid1D(top - depth, top, size, periodic=False)
    y = grid.nodes
    if boundary == "circle":
        upper = "reflecting"
    elif boundary == "interval":
        upper = "absorbing"
    else:
        raise ValueError(f"unknown boundary mode {boundary!r}")
    return FpProblem(grid, np.full(size, -4.0 * kappa), np.full(size, 8.0 * kappa),
                     np.sin(0.5 * np.exp(y)) ** 2, lower="absorbing", upper=upper)


def windowed_rate(times, values, start: float, stop: Optional[float] = None) -> float:
    """Minus the least-squares slope of ``log(values)`` over [start, stop]."""
    times = np.asarray(times)
    values = np.asarray(values)
    stop = times[-1] if stop is None else stop
    sel = (times >= start - 1e-12) & (times <= stop + 1e-12) & (values > 0)
    if sel.sum() < 2:
        raise ValueError("fewer than two positive samples in the fit window")
    slope = np.polyfit(times[sel], np.log(values[sel]), 1)[0]
    return float(-slope)


def decay_rate_from_fp(problem: FpProblem, P0: Optional[DensityField] = None,
                       method: str = "eigen", dt: float = 1e-3,
                       max_horizon: float = 50.0, tol: float = 1e-4) -> float:
    """Asymptotic decay rate of ``integral(weight * P)``.

    ``method="eigen"``: the slowest nonzero decay rate of the discrete
    operator among modes that carry the observable from `P0`.
    ``method="evolve"``: integrate and return the log-slope of successive
    unit-time increments of the observable (so a nonzero stationary value
    is allowed) once it changes by less than `tol` (relative).  Raises
    `NoConvergence` if that does not happen before `max_horizon`.  A
    stationary observable gives rate 0.
    """
    grid = problem.grid
    if P0 is None:
        P0 = DensityField(grid, np.full(grid.size, 1.0 / grid.length))
    w = problem.weight
    op = fp_operator(grid, problem.v, problem.D, problem.lower, problem.upper)
    if method == "eigen":
        if grid.size > 4096:
            raise ValueError("eigen method limited to 4096 nodes")
        lam, right = np.linalg.eig(op.toarray())
        coef = np.linalg.solve(right, P0.values)
        weight_of_mode = np.abs((w @ right) * coef) * grid.h
        scale = max(np.abs(lam).max(), 1e-300)
        carries = weight_of_mode > 1e-10 * max(weight_of_mode.max(), 1e-300)
        decaying = carries & (np.abs(lam) > 1e-10 * scale)
        if not np.any(decaying):
            return 0.0
        return float(np.min(-lam[decaying].real))
    if method != "evolve":
        raise ValueError(f"unknown method {method!r}")
    step = _Stepper(op, dt, "implicit")
    p = P0.values.copy()
    per_unit = max(int(round(1.0 / dt)), 1)
    unit = per_unit * dt
    prev_val = float(np.sum(w * p))
    prev_diff = prev_rate = None
    t = 0.0
    while t < max_horizon - 1e-9:
        for _ in range(per_unit):
            p = step(p)
        t += unit
        val = float(np.sum(w * p))
        diff = val - prev_val
        if abs(diff) <= 1e-14 * max(abs(val), 1e-300):
            # Observable no longer moves: nothing left to decay.
            if prev_diff is not None and abs(prev_diff) <= 1e-14 * max(abs(prev_val), 1e-300):
                return 0.0
        elif prev_diff is not None and prev_diff != 0:
            rate = -math.log(abs(diff) / abs(prev_diff)) / unit
            if prev_rate is not None and abs(rate - prev_rate) <= tol * abs(rate):
                return rate
            prev_rate = rate
        if abs(val) < 1e-280:
            raise NoConvergence("observable underflowed before the rate settled")
        prev_val, prev_diff = val, diff
    raise NoConvergence(f"log-slope still moving at t={max_horizon}; last rate {prev_rate}")
