"""Reduced stochastic models of the diffusion-gradient protocol and the
feedback laws of the two Hamiltonian comparison protocols.

Units: time in 1/kappa when ``kappa = 1``; all rates in 1/time.

Dissipation conventions used throughout the package (rho = (I + a.sigma)/2)::

    dephasing   -beta_j [sigma_j, [sigma_j, rho]]   contracts a_perp(j) at 4 beta_j
    decay       gamma (2 s- rho s+ - {s+ s-, rho})  |0> -> |1> at rate 2 gamma

which give, in the xz-plane,

    d a_x/dt = -(gamma + 4 beta_y + 4 beta_z) a_x
    d a_z/dt = -2 gamma - (2 gamma + 4 beta_x + 4 beta_y) a_z
"""

from __future__ import annotations

from dataclasses import dataclass
import enum
import math
from typing import Optional

import numpy as np

from .core import (
    EPS_NUM,
    BlochState,
    MeasurementSetting,
    TargetSpec,
    measured_spin_axis,
    reduced_coords,
)
from .sde import IntegrationFailure, SdeModel, wrap_circle, wrap_interval

#: Largest tolerated Euler overshoot of the Bloch length before failing.
MAX_OVERSHOOT = 0.5
#: Below this Bloch length the (delta, a) chart is singular.
SINGULAR_LENGTH = 1e-3


class SingularStateError(IntegrationFailure):
    """The (delta, a) chart was evaluated too close to a = 0."""


@dataclass(frozen=True)
class ControlParams:
    """Measurement and feedback strengths.

    ``alpha_max`` and ``k_max`` default to ``kappa * pi**2``, the largest
    strength the diffusion-gradient law ``k = kappa delta**2`` ever uses.
    ``k_perp`` is the constant perpendicular strength of the Hamiltonian
    perpendicular protocol (defaults to ``k_max``).
    """

    kappa: float = 1.0
    mu: float = 1.0
    alpha_max: Optional[float] = None
    k_max: Optional[float] = None
    k_perp: Optional[float] = None

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        for name in ("mu", "alpha_max", "k_max", "k_perp"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.k_perp is not None and self.k_perp > self.kmax * (1 + 1e-12):
            raise ValueError(f"k_perp={self.k_perp} exceeds the bound {self.kmax}")

    @property
    def alpha(self) -> float:
        return self.kappa * math.pi**2 if self.alpha_max is None else self.alpha_max

    @property
    def kmax(self) -> float:
        return self.kappa * math.pi**2 if self.k_max is None else self.k_max

    @property
    def kperp(self) -> float:
        return self.kmax if self.k_perp is None else self.k_perp

    def with_k_perp(self, k: float) -> "ControlParams":
        return ControlParams(self.kappa, self.mu, self.alpha_max, self.k_max, k)


@dataclass(frozen=True)
class NoiseParams:
    beta_x: float = 0.0
    beta_y: float = 0.0
    beta_z: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if min(self.beta_x, self.beta_y, self.beta_z, self.gamma) < 0:
            raise ValueError("noise rates must be non-negative")

    @classmethod
    def uniform(cls, rate: float) -> "NoiseParams":
        """All three dephasing rates and the decay rate equal to `rate`."""
        return cls(rate, rate, rate, rate)

    @property
    def is_zero(self) -> bool:
        return self.beta_x == self.beta_y == self.beta_z == self.gamma == 0.0

    def bloch_drift(self, a):
        """Deterministic Bloch-vector velocity, ``a`` of shape (..., 3)."""
        a = np.asarray(a, dtype=float)
        bx, by, bz, g = self.beta_x, self.beta_y, self.beta_z, self.gamma
        return np.stack([
            -(g + 4 * by + 4 * bz) * a[..., 0],
            -(g + 4 * bx + 4 * bz) * a[..., 1],
            -2 * g - (2 * g + 4 * bx + 4 * by) * a[..., 2],
        ], axis=-1)


class ProtocolKind(enum.Enum):
    DIFFUSION_GRADIENT = "diffusion-gradient"
    DIFFUSION_GRADIENT_LINEARIZED = "diffusion-gradient-linearized"
    HAMILTONIAN_PERPENDICULAR = "hamiltonian-perpendicular"
    HAMILTONIAN_PARALLEL = "hamiltonian-parallel"

    @property
    def uses_hamiltonian(self) -> bool:
        return self in (ProtocolKind.HAMILTONIAN_PERPENDICULAR, ProtocolKind.HAMILTONIAN_PARALLEL)


def measurement_strength(delta, params: ControlParams):
    """Diffusion-gradient strength law ``k = kappa * delta**2``."""
    return params.kappa * np.square(delta)


def diffusion_rate(delta, params: ControlParams):
    """Diffusion rate of the distance to target, ``8 kappa delta**2``."""
    return 8.0 * params.kappa * np.square(delta)


def _wrapper(boundary: str):
    if boundary == "circle":
        return wrap_circle
    if boundary == "interval":
        return wrap_interval
    raise ValueError(f"unknown boundary mode {boundary!r}")


def noiseless_model(params: ControlParams, boundary: str = "circle") -> SdeModel:
    """``d delta = sqrt(8 kappa) delta dW`` on the signed angle.

    With ``boundary="circle"`` the state is the signed angle on (-pi, pi];
    ``"interval"`` glues pi to 0 on [0, pi) instead.
    """
    s = math.sqrt(8.0 * params.kappa)
    wrap = _wrapper(boundary)

    def drift(x):
        return np.zeros_like(x)

    def diffusion(x):
        return (s * np.abs(x))[:, :, None]

    return SdeModel(1, 1, drift, diffusion, wrap, name=f"noiseless[{boundary}]")


def _check_form(form: str):
    if form not in ("consistent", "printed"):
        raise ValueError(f"unknown form {form!r}")


def noisy_model(params: ControlParams, noise: NoiseParams,
                form: str = "consistent") -> SdeModel:
    """Reduced model over ``(signed delta, a)`` with noise channels (dW, dV).

    ``form="consistent"`` uses the length drift implied by the dissipation
    conventions in the module docstring::

        -2 g C - a (g + 4 by + 4 bz) - a (g + 4 bx - 4 bz) C**2

    while ``form="printed"`` uses the variant
    ``-2 g C - a (g + 4 bx + 4 by) - a (g + 4 bx - 4 bz) C``.  Both agree at
    equal rates to leading order in delta; they differ at the antipode.
    The angle equation is the same in both forms.
    """
    _check_form(form)
    k, mu = params.kappa, params.mu
    bx, by, bz, g = noise.beta_x, noise.beta_y, noise.beta_z, noise.gamma
    sk, smu = math.sqrt(8 * k), math.sqrt(8 * mu)

    def _split(x):
        a = x[:, 1]
        if np.any(a < SINGULAR_LENGTH):
            raise SingularStateError(
                f"Bloch length {a.min():.3g} below {SINGULAR_LENGTH}; use bloch_model")
        return x[:, 0], a

    def drift(x):
        d, a = _split(x)
        c, s = np.cos(d), np.sin(d)
        dd = (2 * g / a + c * (g + 4 * (bx - bz))) * s
        if form == "consistent":
            noise_a = -2 * g * c - a * (g + 4 * by + 4 * bz) - a * (g + 4 * bx - 4 * bz) * c**2
        else:
            noise_a = -2 * g * c - a * (g + 4 * bx + 4 * by) - a * (g + 4 * bx - 4 * bz) * c
        da = (1 - a**2) * 4 * k * d**2 / a + noise_a
        return np.stack([dd, da], axis=1)

    def diffusion(x):
        d, a = _split(x)
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = sk * np.abs(d) / a
        out[:, 1, 1] = (1 - a**2) * smu
        return out

    def constraint(x):
        x = x.copy()
        x[:, 0] = wrap_circle(x[:, 0])
        if np.any(x[:, 1] > 1 + MAX_OVERSHOOT):
            raise IntegrationFailure(f"Bloch length {x[:, 1].max()} far above 1")
        x[:, 1] = np.minimum(x[:, 1], 1.0)
        return x

    return SdeModel(2, 2, drift, diffusion, constraint, name=f"noisy[{form}]")


def bloch_angles(xz):
    """Signed angle and length of in-plane Bloch vectors ``(a_x, a_z)``."""
    return np.arctan2(xz[..., 0], xz[..., 1]), np.hypot(xz[..., 0], xz[..., 1])


def bloch_model(params: ControlParams, noise: NoiseParams) -> SdeModel:
    """Diffusion-gradient dynamics in Bloch coordinates ``(a_x, a_z)``.

    Obtained from the ``(delta, a)`` equations by the Ito change of variables
    ``a_x = a sin(delta)``, ``a_z = a cos(delta)``.  With
    ``n = (cos delta, -sin delta)`` (perpendicular, in-plane) and
    ``u = (sin delta, cos delta)`` (along the Bloch vector)::

        d(a_x, a_z) = [-4 k (a_x, a_z) + noise drift] dt
                      + sqrt(8 k) n dW + sqrt(8 mu) (1 - a**2) u dV,

    where ``k = kappa delta**2``.  The Ito correction ``-a/2 (d delta)**2``
    of the change of variables cancels the ``4 k delta**2 (1 - a**2)/a``
    purification drift except for the ``-4 k a`` contraction, and the noise
    drift is the Lindblad velocity of the module docstring.  These
    coefficients have no 1/a or 1/delta singularities.
    """
    k, mu = params.kappa, params.mu
    sk, smu = math.sqrt(8 * k), math.sqrt(8 * mu)
    zero_noise = noise.is_zero

    def drift(x):
        d, _ = bloch_angles(x)
        out = -4 * k * (d**2)[:, None] * x
        if not zero_noise:
            full = np.stack([x[:, 0], np.zeros(len(x)), x[:, 1]], axis=1)
            nd = noise.bloch_drift(full)
            out = out + nd[:, [0, 2]]
        return out

    def diffusion(x):
        d, a = bloch_angles(x)
        c, s = np.cos(d), np.sin(d)
        out = np.empty((x.shape[0], 2, 2))
        w = sk * np.abs(d)
        out[:, 0, 0] = w * c
        out[:, 1, 0] = -w * s
        v = smu * (1 - a**2)
        out[:, 0, 1] = v * s
        out[:, 1, 1] = v * c
        return out

    def constraint(x):
        a = np.hypot(x[:, 0], x[:, 1])
        if np.any(a > 1 + MAX_OVERSHOOT):
            raise IntegrationFailure(f"Bloch length {a.max()} far above 1")
        over = a > 1.0
        if np.any(over):
            x = x.copy()
            x[over] /= a[over, None]
        return x

    return SdeModel(2, 2, drift, diffusion, constraint, name="bloch")


def linearized_model(params: ControlParams, noise: NoiseParams,
                     form: str = "consistent") -> SdeModel:
    """Leading-order model over ``(delta, Delta)``, valid for both small.

    ``d delta = [3 g + 4 (bx - bz)] delta dt + sqrt(8 kappa) delta dW``

    ``d Delta = c dt + 2 sqrt(8 mu) Delta dV`` with ``c = 4 (g + bx + by)``
    (consistent) or ``c = 4 (g + 2 bx + by - bz)`` (printed).
    """
    _check_form(form)
    bx, by, bz, g = noise.beta_x, noise.beta_y, noise.beta_z, noise.gamma
    rate_d = 3 * g + 4 * (bx - bz)
    if form == "consistent":
        source = 4 * (g + bx + by)
    else:
        source = 4 * (g + 2 * bx + by - bz)
    sk, smu = math.sqrt(8 * params.kappa), math.sqrt(8 * params.mu)

    def drift(x):
        return np.stack([rate_d * x[:, 0], np.full(len(x), source)], axis=1)

    def diffusion(x):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = sk * x[:, 0]
        out[:, 1, 1] = 2 * smu * x[:, 1]
        return out

    return SdeModel(2, 2, drift, diffusion, name=f"linearized[{form}]")


def control_hamiltonian_axis(state, target: TargetSpec | None = None):
    """Rotation axis that turns the Bloch vector straight toward the target.

    Returns ``(axis, defined)``.  The axis is ``a x t / |a x t|``; when the
    cross product vanishes (at the target or its antipode) ``defined`` is
    False and the axis is the tie-break ``(0, -1, 0)``.
    """
    t = (target or TargetSpec()).axis
    a = state.vector if isinstance(state, BlochState) else np.asarray(state, float)
    c = np.cross(a, t)
    n = np.linalg.norm(c)
    if n < EPS_NUM:
        return np.array([0.0, -1.0, 0.0]), False
    return c / n, True


def hamiltonian_axes(a, target=None):
    """Batched `control_hamiltonian_axis` plus the rotation gate.

    Returns ``(axes, gate)`` where ``gate`` is 0 at (or numerically at) the
    target or for a zero Bloch vector, and 1 otherwise; antipodal states
    use the tie-break axis with gate 1.
    """
    t = np.asarray(target if target is not None else (0.0, 0.0, 1.0), dtype=float)
    a = np.asarray(a, dtype=float)
    c = np.cross(a, t)
    n = np.linalg.norm(c, axis=-1)
    ok = n > EPS_NUM
    axes = np.where(ok[..., None], c / np.where(ok, n, 1.0)[..., None],
                    np.array([0.0, -1.0, 0.0]))
    along = a @ t
    gate = np.where(ok | (along < -EPS_NUM), 1.0, 0.0)
    return axes, gate


def select_measurement(kind: ProtocolKind, state, params: ControlParams,
                       target: TargetSpec | None = None,
                       previous_angle: float = 0.0) -> list:
    """Measurement settings chosen by protocol `kind` for the current state.

    Perpendicular settings use the in-plane axis orthogonal to the Bloch
    vector; parallel settings use the Bloch direction itself.  For a zero
    Bloch vector the direction of `previous_angle` is used.
    """
    state = state if isinstance(state, BlochState) else BlochState.from_vector(state)
    red = reduced_coords(state, target)
    angle = red.signed_angle if state.length >= EPS_NUM else previous_angle
    perp = measured_spin_axis(angle / 2.0)
    par = np.array([math.sin(angle), 0.0, math.cos(angle)])
    if kind in (ProtocolKind.DIFFUSION_GRADIENT, ProtocolKind.DIFFUSION_GRADIENT_LINEARIZED):
        return [MeasurementSetting.spin(perp, float(measurement_strength(abs(angle), params))),
                MeasurementSetting.spin(par, params.mu)]
    if kind is ProtocolKind.HAMILTONIAN_PERPENDICULAR:
        return [MeasurementSetting.spin(perp, params.kperp)]
    if kind is ProtocolKind.HAMILTONIAN_PARALLEL:
        return [MeasurementSetting.spin(par, params.mu)]
    raise ValueError(f"unknown protocol {kind!r}")
