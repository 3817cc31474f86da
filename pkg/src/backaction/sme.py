"""Stochastic master equation for continuously measured qubits and
N-level systems.

Each measured observable ``S`` at strength ``k`` contributes::

    d rho = -k [S, [S, rho]] dt + sqrt(2 k) (S rho + rho S - 2 <S> rho) dW

Two integrators are provided.  ``scheme="euler"`` is the plain
Euler-Maruyama update of the equation above.  ``scheme="kraus"`` (the
default) applies, per measurement, the exact finite-time Kraus operator of
a fixed observable, ``A = exp(sqrt(2k) Y S - 2k S^2 dt)`` with record
increment ``Y = dW + 2 sqrt(2k) <S> dt``, then normalizes.  Both agree to
first order in dt; the Kraus form keeps rho positive and keeps pure states
pure for any step size, which matters because the adaptive strength
reaches ``kappa pi^2``.  Hamiltonians are applied as exact unitaries and
Lindblad noise as the exact channel ``exp(L dt)`` under the Kraus scheme.

Batches of density matrices have shape ``(B, N, N)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .core import (
    EPS_NUM,
    PAULIS,
    MeasurementSetting,
    bloch_to_density,
    bloch_vectors,
)
from .protocols import ControlParams, NoiseParams, ProtocolKind, hamiltonian_axes
from .sde import IntegrationFailure, NoiseStream, TrajectoryPath, run_ensemble

#: Most negative eigenvalue tolerated before a step is rejected.
POSITIVITY_TOL = 1e-6

SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)


class PositivityViolation(IntegrationFailure):
    """A step produced a density matrix with a negative eigenvalue."""


def dagger(m):
    return np.conj(np.swapaxes(m, -1, -2))


def expect(obs, rho):
    """``Re tr(obs rho)`` for stacked or single matrices."""
    return np.einsum("...ij,...ji->...", obs, rho).real


def validate_density(rho, tol: float = EPS_NUM):
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("density matrix must be square")
    if abs(np.trace(rho) - 1) > tol:
        raise ValueError(f"trace {np.trace(rho).real} differs from 1")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise ValueError("density matrix is not Hermitian")
    if np.linalg.eigvalsh(rho).min() < -tol:
        raise ValueError("density matrix has a negative eigenvalue")
    return rho


def pure_density(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


@dataclass
class LindbladNoise:
    """Dissipators ``rate * (L rho L^+ - {L^+ L, rho}/2)``."""

    operators: list = field(default_factory=list)

    def __post_init__(self):
        for op, rate in self.operators:
            if rate < 0:
                raise ValueError("Lindblad rates must be non-negative")

    @classmethod
    def from_params(cls, noise: NoiseParams) -> "LindbladNoise":
        """Qubit dephasing and decay; ``-b [s_j,[s_j,rho]] = 2 b D[s_j] rho``."""
        ops = []
        for pauli, beta in zip(PAULIS, (noise.beta_x, noise.beta_y, noise.beta_z)):
            if beta > 0:
                ops.append((pauli, 2.0 * beta))
        if noise.gamma > 0:
            ops.append((SIGMA_MINUS, 2.0 * noise.gamma))
        return cls(ops)

    @property
    def is_zero(self) -> bool:
        return not self.operators

    def apply(self, rho):
        """Generator ``L(rho)`` on a single or stacked density matrix."""
        out = np.zeros_like(rho)
        for op, rate in self.operators:
            ld = op.conj().T @ op
            out += rate * (op @ rho @ op.conj().T - 0.5 * (ld @ rho + rho @ ld))
        return out

    def superoperator(self, dim: int) -> np.ndarray:
        """Matrix of the generator acting on row-major ``vec(rho)``."""
        eye = np.eye(dim)
        sup = np.zeros((dim * dim, dim * dim), dtype=complex)
        for op, rate in self.operators:
            ld = op.conj().T @ op
            sup += rate * (np.kron(op, op.conj()) - 0.5 * np.kron(ld, eye)
                           - 0.5 * np.kron(eye, ld.T))
        return sup

    def channel(self, dim: int, dt: float) -> np.ndarray:
        return expm(self.superoperator(dim) * dt)


def _as_noise(noise) -> LindbladNoise:
    if noise is None:
        return LindbladNoise()
    if isinstance(noise, NoiseParams):
        return LindbladNoise.from_params(noise)
    return noise


# --- batched primitives -----------------------------------------------------


def measure_euler(rho, obs, k, dW, dt):
    """Euler increment of one measurement; `k`, `dW` of shape (B,)."""
    k = np.asarray(k, dtype=float)[:, None, None]
    dW = np.asarray(dW, dtype=float)[:, None, None]
    s_rho = obs @ rho
    rho_s = rho @ obs
    comm2 = obs @ s_rho - 2 * s_rho @ obs + rho_s @ obs
    mean = expect(obs, rho)[:, None, None]
    return -k * comm2 * dt + np.sqrt(2 * k) * (s_rho + rho_s - 2 * mean * rho) * dW


def kraus_operator(obs, k, record, dt, involutory: bool = False):
    """``exp(sqrt(2k) Y S - 2k S^2 dt)`` for a batch of observables.

    With ``involutory=True`` (``S^2 = I``) the closed form
    ``cosh(x) I + sinh(x) S`` is used, dropping the scalar factor.
    """
    k = np.asarray(k, dtype=float)
    x = np.sqrt(2 * k) * record
    if involutory:
        dim = obs.shape[-1]
        return (np.cosh(x)[:, None, None] * np.eye(dim)
                + np.sinh(x)[:, None, None] * obs)
    lam, vec = np.linalg.eigh(obs)
    expo = x[:, None] * lam - 2 * k[:, None] * lam**2 * dt
    expo -= expo.max(axis=1, keepdims=True)
    return (vec * np.exp(expo)[:, None, :]) @ dagger(vec)


def measure_kraus(rho, obs, k, dW, dt, involutory: bool = False):
    """Normalized Kraus update for one measurement on a batch."""
    record = np.asarray(dW) + 2 * np.sqrt(2 * np.asarray(k)) * expect(obs, rho) * dt
    a = kraus_operator(obs, k, record, dt, involutory)
    new = a @ rho @ dagger(a)
    tr = np.einsum("bii->b", new).real
    return new / tr[:, None, None]


def spin_operators(axes):
    """``n . sigma`` for a batch of Bloch axes (B, 3)."""
    return np.einsum("bi,ijk->bjk", axes.astype(complex), PAULIS)


def rotation_unitaries(axes, angles):
    """``exp(-i angle n.sigma / 2)`` for batches of axes and angles."""
    half = 0.5 * np.asarray(angles, dtype=float)
    return (np.cos(half)[:, None, None] * np.eye(2)
            - 1j * np.sin(half)[:, None, None] * spin_operators(axes))


def hermitize(rho):
    return 0.5 * (rho + dagger(rho))


@dataclass
class StepDiagnostics:
    """Largest corrections applied by the stabilization stage so far."""

    max_trace_drift: float = 0.0
    max_antihermitian: float = 0.0
    min_eigenvalue: float = 1.0
    steps: int = 0

    def update(self, rho_pre):
        tr = np.einsum("...ii->...", rho_pre).real
        self.max_trace_drift = max(self.max_trace_drift, float(np.max(np.abs(tr - 1))))
        self.max_antihermitian = max(
            self.max_antihermitian, float(np.max(np.abs(rho_pre - dagger(rho_pre)))))
        self.steps += 1


def _stabilize(rho, diag: Optional[StepDiagnostics], rehermitize: bool = True):
    if diag is not None:
        diag.update(rho)
    if rehermitize:
        rho = hermitize(rho)
    tr = np.einsum("...ii->...", rho).real
    return rho / tr[..., None, None]


def _check_qubit_positivity(rho, diag: Optional[StepDiagnostics]):
    a = np.linalg.norm(bloch_vectors(rho), axis=-1)
    lowest = 0.5 * (1 - float(np.max(a)))
    if diag is not None:
        diag.min_eigenvalue = min(diag.min_eigenvalue, lowest)
    if lowest < -POSITIVITY_TOL:
        raise PositivityViolation(
            f"eigenvalue {lowest:.3g} < -{POSITIVITY_TOL}; reduce dt")


def _check_positivity(rho, diag: Optional[StepDiagnostics]):
    lowest = float(np.linalg.eigvalsh(rho).min())
    if diag is not None:
        diag.min_eigenvalue = min(diag.min_eigenvalue, lowest)
    if lowest < -POSITIVITY_TOL:
        raise PositivityViolation(
            f"eigenvalue {lowest:.3g} < -{POSITIVITY_TOL}; reduce dt")


def sme_step(rho, measurements: Sequence[MeasurementSetting], hamiltonian=None,
             noise=None, dWs=None, dt: float = 1e-3, scheme: str = "kraus",
             diagnostics: Optional[StepDiagnostics] = None):
    """Advance one density matrix by one step.

    Parameters
    ----------
    rho : (N, N) density matrix.
    measurements : settings measured during the step, one increment each.
    hamiltonian : optional Hermitian matrix (hbar = 1).
    noise : `NoiseParams`, `LindbladNoise` or None.
    dWs : increments, one per measurement, variance dt.
    """
    rho = np.asarray(rho, dtype=complex)[None]
    dWs = np.zeros(len(measurements)) if dWs is None else np.atleast_1d(dWs)
    if len(dWs) != len(measurements):
        raise ValueError("need one increment per measurement")
    lind = _as_noise(noise)
    dim = rho.shape[-1]
    if scheme == "euler":
        drho = np.zeros_like(rho)
        for m, dw in zip(measurements, dWs):
            drho += measure_euler(rho, m.observable[None], [m.strength], [dw], dt)
        if hamiltonian is not None:
            h = np.asarray(hamiltonian)
            drho += -1j * (h @ rho - rho @ h) * dt
        if not lind.is_zero:
            drho += lind.apply(rho) * dt
        new = rho + drho
    elif scheme == "kraus":
        new = rho
        for m, dw in zip(measurements, dWs):
            new = measure_kraus(new, m.observable[None], np.array([m.strength]),
                                np.array([dw]), dt)
        if hamiltonian is not None:
            lam, vec = np.linalg.eigh(np.asarray(hamiltonian))
            u = (vec * np.exp(-1j * lam * dt)) @ vec.conj().T
            new = u @ new @ u.conj().T
        if not lind.is_zero:
            new = (lind.channel(dim, dt) @ new.reshape(1, -1).T).T.reshape(new.shape)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    new = _stabilize(new, diagnostics)
    _check_positivity(new, diagnostics)
    return new[0]


# --- adaptive qubit protocols ----------------------------------------------


class QubitObservables(NamedTuple):
    error: np.ndarray
    delta: np.ndarray
    length: np.ndarray


def qubit_observables(rho) -> np.ndarray:
    """Stack ``(P_e, delta, a)`` for a batch of qubit density matrices."""
    a = bloch_vectors(rho)
    length = np.linalg.norm(a, axis=-1)
    delta = np.arctan2(np.hypot(a[..., 0], a[..., 1]), a[..., 2])
    pe = rho[..., 1, 1].real
    return np.stack([pe, delta, length], axis=-1)


class ControlledQubit:
    """Batched SME step of one feedback protocol for a target ``|0>``.

    The measurement axes are recomputed from the pre-step Bloch vector:
    perpendicular axis ``(cos x, 0, -sin x)`` and parallel axis
    ``(sin x, 0, cos x)`` with ``x`` the signed polar angle.  Hamiltonian
    protocols rotate toward the target at ``alpha_max`` but never past it
    within one step.

    ``fault="hermiticity"`` is a test hook: it skips re-Hermitization and
    applies the measurement update one-sidedly, so the Hermiticity check of
    the verification suite must fail.
    """

    def __init__(self, kind: ProtocolKind, params: ControlParams,
                 noise: Optional[NoiseParams] = None, scheme: str = "kraus",
                 fault: Optional[str] = None):
        if kind is ProtocolKind.DIFFUSION_GRADIENT_LINEARIZED:
            kind = ProtocolKind.DIFFUSION_GRADIENT
        self.kind = kind
        self.params = params
        self.noise = noise or NoiseParams()
        self.scheme = scheme
        self.fault = fault
        self.lindblad = LindbladNoise.from_params(self.noise)
        self.channels = 2 if kind is ProtocolKind.DIFFUSION_GRADIENT else 1
        self.diagnostics = StepDiagnostics()
        self._channel_cache = {}

    def _settings(self, a):
        x = np.arctan2(a[:, 0], a[:, 2])
        c, s = np.cos(x), np.sin(x)
        zero = np.zeros_like(x)
        perp = np.stack([c, zero, -s], axis=1)
        par = np.stack([s, zero, c], axis=1)
        p = self.params
        if self.kind is ProtocolKind.DIFFUSION_GRADIENT:
            return [(perp, p.kappa * x**2), (par, np.full_like(x, p.mu))]
        if self.kind is ProtocolKind.HAMILTONIAN_PERPENDICULAR:
            return [(perp, np.full_like(x, p.kperp))]
        return [(par, np.full_like(x, p.mu))]

    def _channel(self, dt):
        if dt not in self._channel_cache:
            self._channel_cache[dt] = self.lindblad.channel(2, dt)
        return self._channel_cache[dt]

    def step(self, rho, dW, dt):
        a = bloch_vectors(rho)
        settings = self._settings(a)
        if self.scheme == "kraus":
            new = rho
            for j, (axes, k) in enumerate(settings):
                obs = spin_operators(axes)
                if self.fault == "hermiticity":
                    # Deliberately broken update (fault-injection hook): the
                    # Kraus operator acts on one side only.
                    record = dW[:, j] + 2 * np.sqrt(2 * k) * expect(obs, new) * dt
                    new = kraus_operator(obs, k, record, dt, involutory=True) @ new
                    new = new / np.einsum("bii->b", new).real[:, None, None]
                else:
                    new = measure_kraus(new, obs, k, dW[:, j], dt, involutory=True)
            if self.kind.uses_hamiltonian:
                axes, gate = hamiltonian_axes(a)
                delta = np.arctan2(np.hypot(a[:, 0], a[:, 1]), a[:, 2])
                angle = gate * np.minimum(self.params.alpha * dt, delta)
                u = rotation_unitaries(axes, angle)
                new = u @ new @ dagger(u)
            if not self.lindblad.is_zero:
                new = np.einsum("ij,bj->bi", self._channel(dt),
                                new.reshape(len(new), 4)).reshape(new.shape)
        elif self.scheme == "euler":
            drho = np.zeros_like(rho)
            for j, (axes, k) in enumerate(settings):
                obs = spin_operators(axes)
                if self.fault == "hermiticity":
                    # Deliberately broken back-action (fault-injection hook).
                    mean = expect(obs, rho)[:, None, None]
                    drho += np.sqrt(2 * k)[:, None, None] * (
                        2 * obs @ rho - 2 * mean * rho) * dW[:, j, None, None]
                else:
                    drho += measure_euler(rho, obs, k, dW[:, j], dt)
            if self.kind.uses_hamiltonian:
                axes, gate = hamiltonian_axes(a)
                h = 0.5 * (self.params.alpha * gate)[:, None, None] * spin_operators(axes)
                drho += -1j * (h @ rho - rho @ h) * dt
            if not self.lindblad.is_zero:
                drho += self.lindblad.apply(rho) * dt
            new = rho + drho
        else:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        new = _stabilize(new, self.diagnostics, rehermitize=self.fault != "hermiticity")
        if self.fault is None:
            _check_qubit_positivity(new, self.diagnostics)
        return new


def kraus_bloch(a, n, x):
    """Bloch-vector form of the normalized update with ``A = cosh(x) + sinh(x) n.sigma``."""
    t = np.tanh(x)[:, None]
    na = np.einsum("bi,bi->b", n, a)[:, None]
    sech2 = 1.0 - t**2
    num = 2 * t * (1 + t * na) * n + sech2 * a
    return num / (1 + t**2 + 2 * t * na)


def rotate_bloch(a, axes, angles):
    """Rotate Bloch vectors by `angles` about unit `axes` (right-handed)."""
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    na = np.einsum("bi,bi->b", axes, a)[:, None]
    return a * c + np.cross(axes, a) * s + axes * na * (1 - c)


def noise_affine_map(noise: NoiseParams, dt: float):
    """Exact noise channel on Bloch vectors, ``a -> m * a + b`` (m diagonal)."""
    bx, by, bz, g = noise.beta_x, noise.beta_y, noise.beta_z, noise.gamma
    rates = np.array([g + 4 * by + 4 * bz, g + 4 * bx + 4 * bz, 2 * g + 4 * bx + 4 * by])
    m = np.exp(-rates * dt)
    b = np.zeros(3)
    if g > 0:
        b[2] = -2 * g * (1 - m[2]) / rates[2]
    return m, b


class BlochControlledQubit(ControlledQubit):
    """`ControlledQubit` with the Kraus scheme carried out on Bloch vectors.

    States are ``(B, 3)`` Bloch vectors, or ``(B, 8)`` rows
    ``[a_x, a_y, a_z, k_perp, m_x, m_y, m_z, b_z]`` carrying a per-path
    perpendicular strength and noise map ``a -> m a + b`` (see
    `pack_settings`), so that a whole parameter sweep runs as one batch.
    The measurement, rotation and noise maps are the Bloch images of the
    density-matrix maps, so results agree with `ControlledQubit` to
    roundoff.
    """

    def __init__(self, kind, params, noise=None):
        super().__init__(kind, params, noise, scheme="kraus")
        self._affine_cache = {}

    def step(self, x, dW, dt):
        extended = x.shape[1] > 3
        a = x[:, :3]
        settings = self._settings(a)
        if extended and self.kind is ProtocolKind.HAMILTONIAN_PERPENDICULAR:
            settings = [(settings[0][0], x[:, 3])]
        new = a
        for j, (axes, k) in enumerate(settings):
            sk = np.sqrt(2 * k)
            record = dW[:, j] + 2 * sk * np.einsum("bi,bi->b", axes, new) * dt
            new = kraus_bloch(new, axes, sk * record)
        if self.kind.uses_hamiltonian:
            axes, gate = hamiltonian_axes(a)
            delta = np.arctan2(np.hypot(a[:, 0], a[:, 1]), a[:, 2])
            new = rotate_bloch(new, axes, gate * np.minimum(self.params.alpha * dt, delta))
        if extended:
            new = new * x[:, 4:7]
            new[:, 2] += x[:, 7]
        elif not self.noise.is_zero:
            if dt not in self._affine_cache:
                self._affine_cache[dt] = noise_affine_map(self.noise, dt)
            m, b = self._affine_cache[dt]
            new = new * m + b
        length = np.linalg.norm(new, axis=1)
        self.diagnostics.steps += 1
        self.diagnostics.min_eigenvalue = min(self.diagnostics.min_eigenvalue,
                                              0.5 * (1 - float(length.max())))
        if length.max() > 1 + 2 * POSITIVITY_TOL:
            raise PositivityViolation(f"Bloch length {length.max():.12g} exceeds 1")
        if extended:
            return np.concatenate([new, x[:, 3:]], axis=1)
        return new


def pack_settings(initial, settings, dt: float, paths_per_setting: int) -> np.ndarray:
    """Extended initial rows for `BlochControlledQubit`.

    `settings` is a sequence of ``(NoiseParams, k_perp)``; each is repeated
    `paths_per_setting` times, setting-major.
    """
    a0 = bloch_vectors(initial_density(initial))
    rows = []
    for noise, kperp in settings:
        m, b = noise_affine_map(noise, dt)
        row = np.concatenate([a0, [kperp], m, [b[2]]])
        rows.append(np.repeat(row[None], paths_per_setting, axis=0))
    return np.concatenate(rows, axis=0)


def run_setting_grid(kind: ProtocolKind, params: ControlParams, settings, initial,
                     horizon: float, dt: float, seed: int, paths_per_setting: int,
                     record_every: int = 1, threads: int = 1):
    """Run every ``(NoiseParams, k_perp)`` in `settings` as one batch.

    A `k_perp` of None means ``params.kperp``.

    Path ``i`` of every setting uses stream ``i`` (common random numbers),
    which makes comparisons across settings much less noisy.  Returns
    ``times, records`` with records of shape
    ``(len(settings), paths_per_setting, n_times, 3)`` holding
    ``(P_e, delta, a)``.
    """
    settings = [(noise, params.kperp if k is None else float(k)) for noise, k in settings]
    init = pack_settings(initial, settings, dt, paths_per_setting)
    stepper = BlochControlledQubit(kind, params)
    times, rec, _ = run_ensemble(stepper.step, stepper.channels, init, horizon, dt, seed,
                                 len(init), record_every,
                                 observe=lambda x: bloch_observables(x[:, :3]),
                                 threads=threads, per_path_initial=True,
                                 stream_of=lambda i: i % paths_per_setting)
    return times, rec.reshape(len(settings), paths_per_setting, len(times), 3)


def bloch_observables(a) -> np.ndarray:
    """Stack ``(P_e, delta, a)`` for a batch of Bloch vectors."""
    length = np.linalg.norm(a, axis=-1)
    delta = np.arctan2(np.hypot(a[..., 0], a[..., 1]), a[..., 2])
    return np.stack([0.5 * (1 - a[..., 2]), delta, length], axis=-1)


def initial_density(initial) -> np.ndarray:
    """Accept a density matrix, a Bloch 3-vector or a BlochState."""
    if hasattr(initial, "vector"):
        return bloch_to_density(initial)
    arr = np.asarray(initial)
    if arr.shape == (3,):
        return bloch_to_density(arr.astype(float))
    return validate_density(arr)


def run_controlled_ensemble(kind: ProtocolKind, params: ControlParams,
                            noise: Optional[NoiseParams], initial, horizon: float,
                            dt: float, seed: int, n_paths: int, record_every: int = 1,
                            scheme: str = "kraus", threads: int = 1, callback=None,
                            fault: Optional[str] = None, first_stream: int = 0,
                            representation: str = "density"):
    """Ensemble of controlled qubit trajectories.

    ``representation="bloch"`` runs the Kraus scheme on Bloch vectors
    (fast path, same maps); ``"density"`` evolves 2x2 density matrices and
    also supports the Euler scheme and fault injection.

    Returns ``times, records, stepper`` where ``records[i, j]`` holds
    ``(P_e, delta, a)`` of path ``i`` at ``times[j]``; the stepper carries
    stabilization diagnostics.
    """
    rho0 = initial_density(initial)
    if representation == "bloch":
        if scheme != "kraus" or fault is not None:
            raise ValueError("the Bloch representation supports only the Kraus scheme")
        stepper = BlochControlledQubit(kind, params, noise)
        state0, observe = bloch_vectors(rho0), bloch_observables
    elif representation == "density":
        stepper = ControlledQubit(kind, params, noise, scheme, fault)
        state0, observe = rho0, qubit_observables
    else:
        raise ValueError(f"unknown representation {representation!r}")
    times, rec, _ = run_ensemble(stepper.step, stepper.channels, state0, horizon, dt,
                                 seed, n_paths, record_every, observe=observe,
                                 callback=callback, first_stream=first_stream,
                                 threads=threads)
    return times, rec, stepper


def run_controlled_sme(kind: ProtocolKind, params: ControlParams,
                       noise: Optional[NoiseParams], initial, horizon: float,
                       dt: float, stream: NoiseStream, record_every: int = 1,
                       scheme: str = "kraus") -> TrajectoryPath:
    """Single controlled trajectory; states are rows ``(P_e, delta, a)``."""
    times, rec, stepper = run_controlled_ensemble(
        kind, params, noise, initial, horizon, dt, stream.seed, 1, record_every,
        scheme, first_stream=stream.stream_index)
    return TrajectoryPath(times, rec[0], stream.seed, stream.stream_index,
                          meta={"diagnostics": stepper.diagnostics})


# --- N-level systems ----------------------------------------------------------


def _frame(chi, psi):
    """Rotate `chi` so that <chi|psi> >= 0 and build the orthogonal partner.

    Returns ``(chi', chi_perp, theta)`` with
    ``psi = cos(theta) chi' + sin(theta) chi_perp``.
    """
    chi = np.asarray(chi, dtype=complex)
    psi = np.asarray(psi, dtype=complex)
    chi = chi / np.linalg.norm(chi)
    psi = psi / np.linalg.norm(psi)
    ov = np.vdot(chi, psi)
    mag = min(abs(ov), 1.0)
    if mag > EPS_NUM:
        chi = chi * (ov / abs(ov))
    theta = math.acos(mag)
    rest = psi - mag * chi
    norm = np.linalg.norm(rest)
    if norm < EPS_NUM:
        # psi parallel to chi: pick the basis vector least aligned with chi.
        j = int(np.argmin(np.abs(chi)))
        e = np.zeros_like(chi)
        e[j] = 1.0
        rest = e - np.vdot(chi, e) * chi
        norm = np.linalg.norm(rest)
        theta = 0.0
    return chi, rest / norm, theta


def nlevel_control_observable(chi, psi, geometry: str = "rotating") -> np.ndarray:
    """Observable that rotates `chi` toward `psi` by back-action.

    In the frame ``|0> = chi``, ``|1> = chi_perp`` (phase of psi absorbed,
    ``psi = cos(theta)|0> + sin(theta)|1>``) the observable is ``n . sigma``
    extended by zero.  ``geometry="rotating"`` uses
    ``n = (sin 2theta, -cos 2theta, 0)``; ``geometry="planar"`` uses
    ``n = (1, 0, 0)``, the axis orthogonal to chi inside the chi-psi plane,
    which reduces exactly to the qubit perpendicular measurement.
    """
    c0, c1, theta = _frame(chi, psi)
    if geometry == "rotating":
        n = (math.sin(2 * theta), -math.cos(2 * theta), 0.0)
    elif geometry == "planar":
        n = (1.0, 0.0, 0.0)
    else:
        raise ValueError(f"unknown geometry {geometry!r}")
    off = (n[0] - 1j * n[1]) * np.outer(c0, c1.conj())
    return off + off.conj().T + n[2] * (np.outer(c0, c0.conj()) - np.outer(c1, c1.conj()))


def purity_observable(chi) -> np.ndarray:
    """``2|chi><chi| - I``: +1 on chi, -1 on its complement."""
    chi = np.asarray(chi, dtype=complex)
    chi = chi / np.linalg.norm(chi)
    return 2 * np.outer(chi, chi.conj()) - np.eye(len(chi))


class Dominant(NamedTuple):
    vector: np.ndarray
    degenerate: bool


def _phase_fix(v, tol=1e-12):
    idx = int(np.argmax(np.abs(v) > tol))
    return v * (abs(v[idx]) / v[idx])


def dominant_eigenvector(rho, tie_tol: float = 1e-10) -> Dominant:
    """Eigenvector of the largest eigenvalue, first nonzero entry real > 0.

    If the top eigenvalue is degenerate within `tie_tol`, the projection of
    the lowest-index basis vector onto the top eigenspace is returned and
    `degenerate` is set.
    """
    rho = np.asarray(rho, dtype=complex)
    lam, vec = np.linalg.eigh(rho)
    top = lam[-1]
    space = vec[:, lam > top - tie_tol]
    if space.shape[1] == 1:
        return Dominant(_phase_fix(space[:, 0]), False)
    proj = space @ space.conj().T
    for j in range(rho.shape[0]):
        v = proj[:, j]
        if np.linalg.norm(v) > 1e-8:
            return Dominant(_phase_fix(v / np.linalg.norm(v)), True)
    raise AssertionError("empty eigenspace")


def nlevel_error(rho, psi):
    psi = np.asarray(psi, dtype=complex)
    return 1.0 - np.einsum("i,...ij,j->...", psi.conj(), rho, psi).real


class ControlledNLevel:
    """Batched diffusion-gradient control of an N-level system.

    Each step: ``chi`` = dominant eigenvector of rho, ``delta = 2 theta``
    from ``|<chi|psi>| = cos(theta)``, measure the control observable at
    ``kappa delta^2`` and the purity observable at ``mu``.
    """

    def __init__(self, target, params: ControlParams, noise: Optional[LindbladNoise] = None,
                 geometry: str = "planar"):
        self.psi = np.asarray(target, dtype=complex) / np.linalg.norm(target)
        self.dim = len(self.psi)
        self.params = params
        self.geometry = geometry
        self.lindblad = noise or LindbladNoise()
        self.channels = 2
        self.diagnostics = StepDiagnostics()
        self._channel_cache = {}

    def observables(self, rho):
        """Control observables, purity observables, distances and the lowest
        eigenvalue for a batch."""
        lam, vec = np.linalg.eigh(rho)
        chi = vec[:, :, -1]
        ov = chi.conj() @ self.psi
        mag = np.minimum(np.abs(ov), 1.0)
        phase = np.where(mag > EPS_NUM, ov / np.where(mag > EPS_NUM, np.abs(ov), 1.0), 1.0)
        c0 = chi * phase[:, None]
        rest = self.psi[None, :] - mag[:, None] * c0
        norm = np.linalg.norm(rest, axis=1)
        theta = np.arccos(mag)
        for i in np.flatnonzero(norm < EPS_NUM):
            c0[i], rest[i], theta[i] = _frame(chi[i], self.psi)
            norm[i] = 1.0
        c1 = rest / norm[:, None]
        outer = np.einsum("bi,bj->bij", c0, c1.conj())
        if self.geometry == "rotating":
            coef = np.sin(2 * theta) + 1j * np.cos(2 * theta)
            outer = coef[:, None, None] * outer
        ctrl = outer + dagger(outer)
        pur = 2 * np.einsum("bi,bj->bij", c0, c0.conj()) - np.eye(self.dim)
        return ctrl, pur, 2 * theta, lam[:, 0]

    def step(self, rho, dW, dt):
        ctrl, pur, delta, lowest = self.observables(rho)
        k = self.params.kappa * delta**2
        new = measure_kraus(rho, ctrl, k, dW[:, 0], dt)
        new = measure_kraus(new, pur, np.full(len(rho), self.params.mu), dW[:, 1], dt,
                            involutory=True)
        if not self.lindblad.is_zero:
            if dt not in self._channel_cache:
                self._channel_cache[dt] = self.lindblad.channel(self.dim, dt)
            n2 = self.dim * self.dim
            new = np.einsum("ij,bj->bi", self._channel_cache[dt],
                            new.reshape(len(new), n2)).reshape(new.shape)
        new = _stabilize(new, self.diagnostics)
        self.diagnostics.min_eigenvalue = min(self.diagnostics.min_eigenvalue,
                                              float(lowest.min()))
        if lowest.min() < -POSITIVITY_TOL:
            raise PositivityViolation(f"eigenvalue {lowest.min():.3g} below tolerance")
        return new


def random_pure_states(dim: int, count: int, stream: NoiseStream) -> np.ndarray:
    """Haar-random pure state vectors, shape ``(count, dim)``."""
    g = stream.generator()
    z = g.standard_normal((count, dim)) + 1j * g.standard_normal((count, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def run_nlevel_ensemble(dim: int, target, params: ControlParams, horizon: float,
                        dt: float, seed: int, n_paths: int, initial=None,
                        record_every: int = 1, geometry: str = "planar",
                        noise: Optional[LindbladNoise] = None, threads: int = 1):
    """Ensemble of N-level diffusion-gradient trajectories.

    `initial` is a single state vector or density matrix, a stack of
    ``n_paths`` state vectors, or None for Haar-random pure states drawn from
    a stream reserved for initial conditions.  Returns ``times, P_e, stepper``.
    """
    if not 2 <= dim <= 8:
        raise ValueError(f"N must lie in [2, 8], got {dim}")
    target = np.asarray(target, dtype=complex)
    if target.shape != (dim,):
        raise ValueError("target must be a state vector of length N")
    stepper = ControlledNLevel(target, params, noise, geometry)
    if initial is None:
        initial = random_pure_states(dim, n_paths, NoiseStream(seed, 2**62))
    init = np.asarray(initial, dtype=complex)
    if init.shape == (dim,):
        rho0, per_path = pure_density(init), False
    elif init.shape == (dim, dim):
        rho0, per_path = validate_density(init), False
    else:
        rho0 = np.einsum("bi,bj->bij", init, init.conj())
        per_path = True
    times, rec, _ = run_ensemble(stepper.step, 2, rho0, horizon, dt, seed, n_paths,
                                 record_every, observe=lambda r: nlevel_error(r, target),
                                 threads=threads, per_path_initial=per_path)
    return times, rec, stepper


def run_nlevel_control(dim: int, target, params: ControlParams, horizon: float,
                       dt: float, stream: NoiseStream, initial=None,
                       record_every: int = 1, geometry: str = "planar") -> TrajectoryPath:
    """Single N-level trajectory recording ``P_e = 1 - <psi|rho|psi>``."""
    if initial is None:
        initial = random_pure_states(dim, 1, NoiseStream(stream.seed, 2**62 + stream.stream_index))[0]
    if not 2 <= dim <= 8:
        raise ValueError(f"N must lie in [2, 8], got {dim}")
    stepper = ControlledNLevel(target, params, None, geometry)
    init = np.asarray(initial, dtype=complex)
    rho0 = pure_density(init) if init.ndim == 1 else validate_density(init)
    times, rec, _ = run_ensemble(stepper.step, 2, rho0, horizon, dt, stream.seed, 1,
                                 record_every,
                                 observe=lambda r: nlevel_error(r, stepper.psi),
                                 first_stream=stream.stream_index)
    return TrajectoryPath(times, rec[0], stream.seed, stream.stream_index)
