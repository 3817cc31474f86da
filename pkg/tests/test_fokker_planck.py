import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from backaction.fokker_planck import (DensityField, FpProblem, Grid1D, GridMismatch,
                                      NoConvergence, StabilityViolation, circle_problem,
                                      decay_rate_from_fp, fp_evolve, fp_operator,
                                      log_chart_problem, probability_current, stability_bound,
                                      windowed_rate)


def moments(P):
    x = P.grid.nodes
    m = P.integrate(x) / P.mass
    return m, P.integrate((x - m) ** 2) / P.mass


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid1D(0.0, 1.0, 10)
    with pytest.raises(ValueError):
        Grid1D(1.0, 0.0, 100)
    g = Grid1D(0.0, 1.0, 100, periodic=False)
    assert g.nodes[0] == pytest.approx(0.005)


def test_density_validation():
    g = Grid1D(0.0, 1.0, 100)
    with pytest.raises(GridMismatch):
        DensityField(g, np.ones(50))
    with pytest.raises(ValueError):
        DensityField(g, np.full(100, 2.0))


def test_current_heat_kernel():
    g = Grid1D(-10, 10, 2000)
    P = DensityField.gaussian(g, 0.0, 1.0)
    J = probability_current(P, 0.0, 3.0)
    dP = np.gradient(P.values, g.h)
    np.testing.assert_allclose(J, -1.5 * dP, atol=1e-4)


def test_current_drift_cancels_diffusion_gradient():
    g = Grid1D(-math.pi, math.pi, 4000)
    P = DensityField.gaussian(g, 0.0, 0.5)
    D = 1.0 + 0.5 * np.sin(g.nodes)
    v = 0.25 * np.cos(g.nodes)
    J = probability_current(P, v, D)
    np.testing.assert_allclose(J, -0.5 * D * np.gradient(P.values, g.h), atol=1e-5)


@pytest.mark.parametrize("size", [256, 512])
def test_current_vanishes_for_inverse_diffusion(size):
    g = Grid1D(0.0, 2 * math.pi, size)
    D = 2.0 + np.cos(g.nodes)
    p = 1.0 / D
    P = DensityField(g, p / (p.sum() * g.h))
    J = probability_current(P, 0.0, D)
    assert np.max(np.abs(J)) < 10 * g.h**2


def test_current_grid_mismatch():
    g = Grid1D(0.0, 1.0, 100)
    P = DensityField(g, np.ones(100))
    with pytest.raises(GridMismatch):
        probability_current(P, np.zeros(50), 1.0)


@pytest.mark.parametrize("method", ["explicit", "implicit", "crank-nicolson"])
def test_heat_variance_growth(method):
    g = Grid1D(-15, 15, 1200)
    D, t, s0 = 2.0, 1.5, 1.0
    P = fp_evolve(DensityField.gaussian(g, 0.0, s0), 0.0, D, t,
                  dt=None if method == "explicit" else 1e-3, method=method)
    _, var = moments(P)
    assert var == pytest.approx(s0**2 + D * t, rel=5e-3)


def test_rigid_translation():
    g = Grid1D(-10, 10, 2000)
    P = fp_evolve(DensityField.gaussian(g, -3.0, 0.5), 1.0, 0.0, 4.0, dt=1e-3,
                  method="crank-nicolson")
    mean, var = moments(P)
    assert mean == pytest.approx(1.0, abs=1e-6)
    assert var == pytest.approx(0.25, rel=0.02)


def test_stability_violation():
    g = Grid1D(0, 1, 100)
    bound = stability_bound(g, 1.0)
    assert bound == pytest.approx(g.h**2 / 2)
    with pytest.raises(StabilityViolation):
        fp_evolve(DensityField(g, np.ones(100)), 0.0, 1.0, 0.1, dt=2 * bound)


def test_mass_conservation_long_run():
    prob = circle_problem(size=128)
    P0 = DensityField.gaussian(prob.grid, 2.0, 0.3)
    n = 10**5
    dt = stability_bound(prob.grid, prob.D)
    P = fp_evolve(P0, prob.v, prob.D, n * dt, dt=dt)
    assert abs(P.mass - 1.0) < 1e-10
    assert P.values.min() >= 0


def test_absorbing_wall_loses_mass():
    g = Grid1D(0, 1, 200, periodic=False)
    P = fp_evolve(DensityField.gaussian(g, 0.5, 0.1), 0.0, 0.5, 0.5, dt=1e-3,
                  method="implicit", lower="absorbing")
    assert 0 < P.mass < 1
    with pytest.raises(ValueError):
        fp_operator(g, 0.0, 1.0, lower="sticky")


def test_decay_rate_heat_on_circle():
    c = 0.7
    g = Grid1D(-math.pi, math.pi, 256)
    x = g.nodes
    prob = FpProblem(g, np.zeros(g.size), np.full(g.size, 2 * c), 0.5 * (1 - np.cos(x)))
    P0 = DensityField.gaussian(g, 2.0, 0.3)
    eig = decay_rate_from_fp(prob, P0, "eigen")
    evo = decay_rate_from_fp(prob, P0, "evolve", dt=1e-3)
    assert eig == pytest.approx(c, rel=1e-3)
    assert evo == pytest.approx(eig, rel=0.01)


def test_decay_rate_frozen_dynamics():
    g = Grid1D(-math.pi, math.pi, 128)
    prob = FpProblem(g, np.zeros(g.size), np.zeros(g.size), 0.5 * (1 - np.cos(g.nodes)))
    P0 = DensityField.gaussian(g, 1.0, 0.2)
    assert decay_rate_from_fp(prob, P0, "eigen") == 0.0
    assert decay_rate_from_fp(prob, P0, "evolve") == 0.0


def test_decay_rate_no_convergence():
    prob = log_chart_problem(size=400, depth=30)
    with pytest.raises(NoConvergence):
        decay_rate_from_fp(prob, prob.initial(prob.grid.upper), "evolve", dt=1e-2,
                           max_horizon=5)


def test_log_chart_rate_grid_converged():
    rates = []
    for size in (1200, 2400):
        prob = log_chart_problem(size=size)
        t, v = prob.series(prob.initial(prob.grid.upper), 12.0, 1e-3, record_every=100)
        rates.append(windowed_rate(t, v, 1.0, 12.0))
    assert rates[0] == pytest.approx(rates[1], rel=1e-3)


def test_log_chart_boundary_modes():
    with pytest.raises(ValueError):
        log_chart_problem(boundary="other")
    assert log_chart_problem(size=200, boundary="interval").upper == "absorbing"


def test_windowed_rate_exact():
    t = np.linspace(0, 10, 101)
    assert windowed_rate(t, 3 * np.exp(-0.4 * t), 2.0) == pytest.approx(0.4, rel=1e-12)
    with pytest.raises(ValueError):
        windowed_rate(t, np.zeros_like(t), 0.0)


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 0.8), st.floats(0.05, 2.0), st.floats(-1, 1))
def test_implicit_scheme_conserves_mass_and_positivity(center, width, dscale, vscale):
    g = Grid1D(-math.pi, math.pi, 128)
    D = dscale * (1.1 + np.sin(g.nodes))
    v = vscale * np.cos(g.nodes)
    P = fp_evolve(DensityField.gaussian(g, center, width), v, D, 0.5, dt=1e-2,
                  method="implicit")
    assert abs(P.mass - 1.0) < 1e-12
    assert P.values.min() > -1e-12
