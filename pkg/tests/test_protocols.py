import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from backaction.core import BlochState
from backaction.protocols import (ControlParams, NoiseParams, ProtocolKind, SingularStateError,
                                  bloch_model, control_hamiltonian_axis, diffusion_rate,
                                  hamiltonian_axes, linearized_model, measurement_strength,
                                  noiseless_model, noisy_model, select_measurement)


def coeffs(model, state):
    x = np.atleast_2d(np.asarray(state, dtype=float))
    return model.drift(x)[0], model.diffusion(x)[0]


@pytest.mark.parametrize("delta, kappa, expected", [
    (0.0, 1.0, 0.0), (math.pi, 1.0, math.pi**2), (1.0, 2.0, 2.0),
])
def test_measurement_strength(delta, kappa, expected):
    assert measurement_strength(delta, ControlParams(kappa=kappa)) == pytest.approx(expected)


def test_default_bounds_are_kappa_pi_squared():
    p = ControlParams(kappa=2.0)
    assert p.alpha == p.kmax == p.kperp == pytest.approx(2 * math.pi**2)
    with pytest.raises(ValueError):
        ControlParams(k_perp=100.0)
    with pytest.raises(ValueError):
        ControlParams(kappa=0.0)


@pytest.mark.parametrize("delta, sigma", [
    (0.0, 0.0), (1.0, math.sqrt(8)), (math.pi / 2, math.sqrt(8) * math.pi / 2),
])
def test_noiseless_model_coefficients(delta, sigma):
    drift, diff = coeffs(noiseless_model(ControlParams()), [delta])
    assert drift[0] == 0.0
    assert diff[0, 0] == pytest.approx(sigma)
    assert diff[0, 0] ** 2 == pytest.approx(diffusion_rate(delta, ControlParams()))


def test_noisy_model_reduces_to_noiseless():
    params = ControlParams()
    grid = np.linspace(0, math.pi, 1000)
    noisy = noisy_model(params, NoiseParams())
    plain = noiseless_model(params)
    x = np.stack([grid, np.ones_like(grid)], axis=1)
    np.testing.assert_allclose(noisy.drift(x)[:, 0], plain.drift(grid[:, None])[:, 0],
                               atol=1e-12)
    np.testing.assert_allclose(noisy.diffusion(x)[:, 0, 0],
                               plain.diffusion(grid[:, None])[:, 0, 0], atol=1e-12)
    np.testing.assert_allclose(noisy.drift(x)[:, 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(noisy.diffusion(x)[:, 1, 1], 0.0, atol=1e-12)


@pytest.mark.parametrize("form", ["consistent", "printed"])
def test_noisy_model_at_target_with_equal_rates(form):
    g = 0.05
    drift, _ = coeffs(noisy_model(ControlParams(), NoiseParams.uniform(g), form), [0.0, 1.0])
    assert drift[0] == pytest.approx(0.0, abs=1e-15)
    assert drift[1] == pytest.approx(-12 * g)


def test_noisy_model_equator_noiseless():
    drift, diff = coeffs(noisy_model(ControlParams(), NoiseParams()), [math.pi / 2, 1.0])
    assert drift[1] == 0.0
    assert diff[0, 0] == pytest.approx(math.sqrt(8) * math.pi / 2)


def test_noisy_model_singular_length():
    with pytest.raises(SingularStateError):
        coeffs(noisy_model(ControlParams(), NoiseParams()), [0.3, 1e-4])
    with pytest.raises(ValueError):
        noisy_model(ControlParams(), NoiseParams(), form="other")


def test_linearized_model_coefficients():
    g = 0.1
    model = linearized_model(ControlParams(), NoiseParams.uniform(g))
    drift, diff = coeffs(model, [1.0, 0.0])
    assert drift[0] == pytest.approx(3 * g)
    assert drift[1] == pytest.approx(12 * g)
    drift, diff = coeffs(linearized_model(ControlParams(mu=2.0), NoiseParams()), [0.1, 0.2])
    assert np.all(drift == 0.0)
    assert diff[0, 0] == pytest.approx(math.sqrt(8) * 0.1)
    assert diff[1, 1] == pytest.approx(2 * math.sqrt(16) * 0.2)
    drift, _ = coeffs(linearized_model(ControlParams(), NoiseParams(0.2, 0, 0.2, 0)), [1.0, 0.1])
    assert drift[0] == 0.0


def test_bloch_model_matches_noisy_model_by_ito():
    # drift of a_x = a sin(delta) by Ito's lemma from the (delta, a) equations
    params, noise = ControlParams(mu=0.7), NoiseParams(0.01, 0.02, 0.03, 0.04)
    d, a = 0.8, 0.9
    (vd, va), dd = coeffs(noisy_model(params, noise), [d, a])
    sd, sa = dd[0, 0], dd[1, 1]
    ax = va * math.sin(d) + a * math.cos(d) * vd - 0.5 * a * math.sin(d) * sd**2
    az = va * math.cos(d) - a * math.sin(d) * vd - 0.5 * a * math.cos(d) * sd**2
    drift, diff = coeffs(bloch_model(params, noise), [a * math.sin(d), a * math.cos(d)])
    np.testing.assert_allclose(drift, [ax, az], rtol=1e-12)
    np.testing.assert_allclose(diff[:, 0], [a * math.cos(d) * sd, -a * math.sin(d) * sd],
                               rtol=1e-12)
    np.testing.assert_allclose(diff[:, 1], [math.sin(d) * sa, math.cos(d) * sa], rtol=1e-12)


def test_control_hamiltonian_axis():
    axis, ok = control_hamiltonian_axis(BlochState(1, 0, 0))
    np.testing.assert_allclose(axis, (0, -1, 0))
    assert ok
    _, ok = control_hamiltonian_axis(BlochState(0, 0, 0.5))
    assert not ok
    axis, ok = control_hamiltonian_axis(BlochState(0, 0, -1))
    assert not ok
    np.testing.assert_allclose(axis, (0, -1, 0))


def test_hamiltonian_axes_gate():
    a = np.array([[0, 0, 1.0], [0, 0, -1.0], [1.0, 0, 0], [0, 0, 0]])
    axes, gate = hamiltonian_axes(a)
    np.testing.assert_array_equal(gate, [0, 1, 1, 0])
    np.testing.assert_allclose(axes[1], (0, -1, 0))


def test_select_measurement_diffusion_gradient_equator():
    settings = select_measurement(ProtocolKind.DIFFUSION_GRADIENT, BlochState(1, 0, 0),
                                  ControlParams())
    perp, par = settings
    np.testing.assert_allclose(perp.axis, (0, 0, -1), atol=1e-15)
    assert perp.strength == pytest.approx((math.pi / 2) ** 2)
    np.testing.assert_allclose(par.axis, (1, 0, 0), atol=1e-15)
    assert par.strength == 1.0


def test_select_measurement_at_target():
    perp, par = select_measurement(ProtocolKind.DIFFUSION_GRADIENT, BlochState(0, 0, 1),
                                   ControlParams(mu=0.5))
    assert perp.strength == 0.0
    assert par.strength == 0.5


def test_select_measurement_hamiltonian_protocols():
    s = select_measurement(ProtocolKind.HAMILTONIAN_PARALLEL, BlochState(0.6, 0, 0.8),
                           ControlParams())
    assert len(s) == 1 and s[0].strength == 1.0
    np.testing.assert_allclose(s[0].axis, (0.6, 0, 0.8))
    s = select_measurement(ProtocolKind.HAMILTONIAN_PERPENDICULAR, BlochState(0.6, 0, 0.8),
                           ControlParams(k_perp=2.0))
    assert len(s) == 1 and s[0].strength == 2.0
    assert s[0].axis @ np.array([0.6, 0, 0.8]) == pytest.approx(0.0, abs=1e-15)


@given(st.floats(-math.pi, math.pi), st.floats(0.05, 1.0))
def test_perpendicular_axis_orthogonal_to_state(angle, a):
    state = BlochState(a * math.sin(angle), 0.0, a * math.cos(angle))
    perp, par = select_measurement(ProtocolKind.DIFFUSION_GRADIENT, state, ControlParams())
    assert abs(perp.axis @ state.vector) < 1e-12
    assert np.linalg.norm(perp.axis) == pytest.approx(1.0)
    assert perp.strength == pytest.approx(abs(angle) ** 2)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_noise_drift_keeps_bloch_ball_invariant(bx, by, bz, g):
    # on the surface of the ball the Lindblad velocity never points outward
    noise = NoiseParams(bx, by, bz, g)
    for angle in np.linspace(-math.pi, math.pi, 13):
        a = np.array([math.sin(angle), 0.0, math.cos(angle)])
        assert a @ noise.bloch_drift(a) <= 1e-12
