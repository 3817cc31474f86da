"""Qubit states on the Bloch sphere, the adaptive measurement axis and the
error-probability metric.

Conventions: ``|0>`` is the +1 eigenstate of sigma_z and is the default
target.  A density matrix is ``rho = (I + a . sigma) / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Optional

import numpy as np

#: Shared tolerance for algebraic identities (trace, Hermiticity, norms).
EPS_NUM = 1e-9

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY = np.eye(2, dtype=complex)
PAULIS = np.stack([SIGMA_X, SIGMA_Y, SIGMA_Z])

Z_AXIS = np.array([0.0, 0.0, 1.0])


class InvalidStateError(ValueError):
    """A Bloch vector or density matrix outside the physical set."""


class DegenerateStateError(ValueError):
    """Direction-dependent quantity requested for a direction-free state."""


@dataclass(frozen=True)
class BlochState:
    a_x: float
    a_y: float
    a_z: float

    def __post_init__(self):
        if self.length > 1.0 + EPS_NUM:
            raise InvalidStateError(f"Bloch vector length {self.length!r} exceeds 1")

    @classmethod
    def from_vector(cls, v) -> "BlochState":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), float(v[2]))

    @classmethod
    def from_polar(cls, delta: float, a: float = 1.0) -> "BlochState":
        """State at angle `delta` from +z in the xz-plane."""
        return cls(a * math.sin(delta), 0.0, a * math.cos(delta))

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.a_x, self.a_y, self.a_z])

    @property
    def length(self) -> float:
        return math.sqrt(self.a_x**2 + self.a_y**2 + self.a_z**2)

    @property
    def mixedness(self) -> float:
        """Delta = 1 - a."""
        return 1.0 - self.length


@dataclass(frozen=True)
class ReducedState:
    """Signed polar angle on the target great circle plus Bloch length.

    The signed angle lives on (-pi, pi]; the distance to the target is its
    absolute value, so crossing the antipode is a smooth turning point.
    """

    signed_angle: float
    a: float

    @property
    def delta(self) -> float:
        return abs(self.signed_angle)

    @property
    def theta(self) -> float:
        return self.signed_angle / 2.0

    @property
    def mixedness(self) -> float:
        return 1.0 - self.a


@dataclass(frozen=True)
class MeasurementSetting:
    """Observable measured continuously at `strength` (1/time).

    `axis` is the Bloch axis for qubit spin observables, None otherwise.
    """

    observable: np.ndarray
    strength: float
    axis: Optional[np.ndarray] = None

    def __post_init__(self):
        obs = np.asarray(self.observable)
        if obs.ndim != 2 or obs.shape[0] != obs.shape[1]:
            raise ValueError("observable must be a square matrix")
        if np.max(np.abs(obs - obs.conj().T)) > EPS_NUM:
            raise ValueError("observable must be Hermitian")
        if self.strength < 0:
            raise ValueError("measurement strength must be non-negative")

    @classmethod
    def spin(cls, axis, strength: float) -> "MeasurementSetting":
        axis = np.asarray(axis, dtype=float)
        return cls(np.tensordot(axis, PAULIS, axes=1), float(strength), axis)


@dataclass(frozen=True)
class TargetSpec:
    target_axis: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        n = float(np.linalg.norm(self.target_axis))
        if abs(n - 1.0) > EPS_NUM:
            raise ValueError(f"target axis must be a unit vector, got norm {n}")

    @property
    def axis(self) -> np.ndarray:
        return np.asarray(self.target_axis, dtype=float)


def measured_spin_axis(theta):
    """Bloch axis of ``cos(2 theta) sigma_x - sin(2 theta) sigma_z``.

    This is the axis perpendicular to the pure state
    ``cos(theta)|0> + sin(theta)|1>`` inside the xz-plane.  Vectorizes over
    `theta` (trailing axis of length 3).
    """
    theta = np.asarray(theta, dtype=float)
    return np.stack(
        [np.cos(2 * theta), np.zeros_like(theta), -np.sin(2 * theta)], axis=-1
    )


def state_axis(theta):
    """Bloch axis of ``cos(theta)|0> + sin(theta)|1>``."""
    theta = np.asarray(theta, dtype=float)
    return np.stack(
        [np.sin(2 * theta), np.zeros_like(theta), np.cos(2 * theta)], axis=-1
    )


def bloch_to_density(state) -> np.ndarray:
    """``rho = (I + a . sigma) / 2`` for a `BlochState` or 3-vector."""
    v = state.vector if isinstance(state, BlochState) else np.asarray(state, float)
    if np.linalg.norm(v) > 1.0 + EPS_NUM:
        raise InvalidStateError(f"Bloch vector length {np.linalg.norm(v)} exceeds 1")
    return 0.5 * (IDENTITY + np.tensordot(v, PAULIS, axes=1))


def bloch_vectors(rho: np.ndarray) -> np.ndarray:
    """Bloch vectors of a stack of 2x2 density matrices, no validation."""
    rho = np.asarray(rho)
    return np.stack(
        [
            2.0 * rho[..., 0, 1].real,
            -2.0 * rho[..., 0, 1].imag,
            (rho[..., 0, 0] - rho[..., 1, 1]).real,
        ],
        axis=-1,
    )


def density_to_bloch(rho) -> BlochState:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise InvalidStateError(f"expected a 2x2 matrix, got shape {rho.shape}")
    if abs(np.trace(rho) - 1.0) > EPS_NUM:
        raise InvalidStateError(f"trace {np.trace(rho)} differs from 1")
    if np.max(np.abs(rho - rho.conj().T)) > EPS_NUM:
        raise InvalidStateError("matrix is not Hermitian")
    return BlochState.from_vector(bloch_vectors(rho))


def signed_angle_of(vector, target=None) -> float:
    """Signed angle of a Bloch vector from the target axis.

    The orientation is taken in the plane spanned by the target and the
    x-axis after removing the azimuth, which is the xz-plane for the default
    target.
    """
    v = np.asarray(vector, dtype=float)
    t = Z_AXIS if target is None else np.asarray(target, dtype=float)
    along = float(v @ t)
    perp = v - along * t
    # Reference direction in the plane perpendicular to the target.
    ref = np.array([1.0, 0.0, 0.0]) - t[0] * t
    if np.linalg.norm(ref) < EPS_NUM:
        ref = np.array([0.0, 0.0, -1.0]) - t[2] * t
    ref /= np.linalg.norm(ref)
    side = float(perp @ ref)
    sign = -1.0 if side < 0 else 1.0
    return sign * math.atan2(float(np.linalg.norm(perp)), along)


def reduced_coords(state: BlochState, target: TargetSpec | None = None,
                   previous: ReducedState | None = None) -> ReducedState:
    """Distance-to-target chart ``(signed angle, length)`` of a Bloch state.

    A zero Bloch vector has no direction: the previous angle is reused if
    given, otherwise the angle is 0.
    """
    target = target or TargetSpec()
    a = state.length
    if a < EPS_NUM:
        angle = previous.signed_angle if previous is not None else 0.0
        return ReducedState(angle, a)
    return ReducedState(signed_angle_of(state.vector, target.axis), a)


def error_probability(delta, a=1.0):
    """Probability of not finding the system in the target state.

    ``P_e = (1 - a cos(delta)) / 2``; reduces to ``sin(delta/2)**2`` for pure
    states.
    """
    delta = np.asarray(delta, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.any((delta < -EPS_NUM) | (delta > math.pi + EPS_NUM)):
        raise ValueError("delta must lie in [0, pi]")
    if np.any((a < -EPS_NUM) | (a > 1.0 + EPS_NUM)):
        raise ValueError("Bloch length must lie in [0, 1]")
    pe = 0.5 * (1.0 - a * np.cos(delta))
    # sin^2 form keeps relative precision near the target for pure states.
    pe = np.where(a == 1.0, np.sin(0.5 * delta) ** 2, pe)
    return pe if pe.ndim else float(pe)
