"""Backstepping error variables, auxiliary force law and the shared Lyapunov function.

Also hosts the fault-unaware backstepping baseline controller (BSC).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from almpc.allocation import FaultParameters, InputLimits, ThrusterLayout, allocate_damped, project_input
from almpc.dynamics import HydroModel, VehicleState, coriolis, damping, rotation, skew, wrap_angle


def _check_sym(name: str, A: np.ndarray, strict: bool) -> np.ndarray:
    A = np.asarray(A, dtype=float).reshape(3, 3)
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    lam = np.min(np.linalg.eigvalsh(A))
    if (strict and lam <= 0.0) or (not strict and lam < 0.0):
        raise ValueError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
    return A


@dataclass(frozen=True)
class ReferenceSignal:
    """Desired Earth-fixed pose with its first and second time derivatives."""

    eta_d: np.ndarray
    eta_d_dot: np.ndarray
    eta_d_ddot: np.ndarray

    def __post_init__(self):
        for name in ("eta_d", "eta_d_dot", "eta_d_ddot"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    @classmethod
    def constant(cls, eta_d) -> "ReferenceSignal":
        return cls(eta_d, np.zeros(3), np.zeros(3))

    @property
    def nu_d(self) -> np.ndarray:
        """Compatible body-frame velocity ``J(psi_d)^T eta_d_dot``."""
        return rotation(self.eta_d[2]).T @ self.eta_d_dot

    @property
    def nu_d_dot(self) -> np.ndarray:
        J = rotation(self.eta_d[2])
        return -skew(self.eta_d_dot[2]) @ J.T @ self.eta_d_dot + J.T @ self.eta_d_ddot

    @property
    def state(self) -> VehicleState:
        return VehicleState(self.eta_d, self.nu_d)


@dataclass(frozen=True)
class BackstepGains:
    Kp: np.ndarray = field(default_factory=lambda: np.eye(3))
    Kd: np.ndarray = field(default_factory=lambda: np.eye(3))
    Pd: np.ndarray = field(default_factory=lambda: 1e-3 * np.eye(3))
    Lambda: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        object.__setattr__(self, "Kp", _check_sym("Kp", self.Kp, strict=True))
        object.__setattr__(self, "Kd", _check_sym("Kd", self.Kd, strict=True))
        object.__setattr__(self, "Pd", _check_sym("Pd", self.Pd, strict=True))
        Lam = np.asarray(self.Lambda, dtype=float).reshape(3, 3)
        if np.any(Lam != np.diag(np.diag(Lam))) or np.any(np.diag(Lam) < 0.0):
            raise ValueError("Lambda must be diagonal with non-negative entries")
        object.__setattr__(self, "Lambda", Lam)


@dataclass(frozen=True)
class AugmentedError:
    """Error state ``xi = [eta_tilde, s, d]``."""

    eta_tilde: np.ndarray
    s: np.ndarray
    d: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("eta_tilde", "s", "d"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> "AugmentedError":
        xi = np.asarray(xi, dtype=float)
        return cls(xi[0:3], xi[3:6], xi[6:9])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.eta_tilde, self.s, self.d])

    def __neg__(self) -> "AugmentedError":
        return AugmentedError(-self.eta_tilde, -self.s, -self.d)


class ErrorVariables(NamedTuple):
    eta_tilde: np.ndarray
    s: np.ndarray
    v_r: np.ndarray
    v_r_dot: np.ndarray


def error_variables(state: VehicleState, ref: ReferenceSignal) -> ErrorVariables:
    eta_tilde = state.eta - ref.eta_d
    eta_tilde[2] = wrap_angle(eta_tilde[2])
    J = rotation(state.psi)
    eta_dot = J @ state.nu
    eta_r_dot = ref.eta_d_dot - eta_tilde
    s = eta_dot - eta_r_dot
    eta_r_ddot = ref.eta_d_ddot - (eta_dot - ref.eta_d_dot)
    v_r = J.T @ eta_r_dot
    # d/dt J^T = -S(r) J^T with the measured yaw rate
    v_r_dot = -skew(state.nu[2]) @ v_r + J.T @ eta_r_ddot
    return ErrorVariables(eta_tilde, s, v_r, v_r_dot)


def augmented_error(state: VehicleState, ref: ReferenceSignal, d=None) -> AugmentedError:
    ev = error_variables(state, ref)
    return AugmentedError(ev.eta_tilde, ev.s, np.zeros(3) if d is None else d)


def state_from_error(xi: AugmentedError, ref: ReferenceSignal) -> VehicleState:
    """Inverse of :func:`augmented_error` (pose unwrapped around ``eta_d``)."""
    eta = ref.eta_d + xi.eta_tilde
    eta_dot = xi.s + ref.eta_d_dot - xi.eta_tilde
    return VehicleState(eta, rotation(eta[2]).T @ eta_dot)


def auxiliary_law(state: VehicleState, ref: ReferenceSignal, gains: BackstepGains, hydro: HydroModel) -> np.ndarray:
    """Backstepping generalized force ``tau_b`` (body frame)."""
    ev = error_variables(state, ref)
    nu = state.nu
    J = rotation(state.psi)
    return (
        hydro.M @ ev.v_r_dot
        + coriolis(nu, hydro) @ ev.v_r
        + damping(nu, hydro) @ ev.v_r
        - J.T @ (gains.Kp @ ev.eta_tilde + gains.Kd @ ev.s)
    )


def m_star(psi: float, hydro: HydroModel) -> np.ndarray:
    J = rotation(psi)
    return J @ hydro.M @ J.T


def m_star_dot(psi: float, r: float, hydro: HydroModel) -> np.ndarray:
    J = rotation(psi)
    S = skew(r)
    return J @ (S @ hydro.M - hydro.M @ S) @ J.T


def c_star(nu, psi: float, hydro: HydroModel) -> np.ndarray:
    J = rotation(psi)
    return J @ (coriolis(nu, hydro) - hydro.M @ skew(nu[2])) @ J.T


def lyapunov_v2(eta_tilde, s, gains: BackstepGains, hydro: HydroModel, psi: float) -> float:
    eta_tilde = np.asarray(eta_tilde, dtype=float)
    s = np.asarray(s, dtype=float)
    return 0.5 * float(eta_tilde @ gains.Kp @ eta_tilde) + 0.5 * float(s @ m_star(psi, hydro) @ s)


def lyapunov_value(xi: AugmentedError, gains: BackstepGains, hydro: HydroModel, psi: float) -> float:
    """Composite Lyapunov function ``V2 + 0.5 d' Pd d``."""
    return lyapunov_v2(xi.eta_tilde, xi.s, gains, hydro, psi) + 0.5 * float(xi.d @ gains.Pd @ xi.d)


def bsc_controller(
    state: VehicleState,
    ref: ReferenceSignal,
    gains: BackstepGains,
    hydro: HydroModel,
    layout: ThrusterLayout,
    limits: InputLimits,
    u_prev,
    dt: float,
    fault_assumed: FaultParameters | None = None,
    epsilon: float = 1e-6,
) -> np.ndarray:
    """Backstepping baseline: auxiliary law, fault-unaware allocation, projection."""
    fault = FaultParameters.nominal(layout.n_thrusters) if fault_assumed is None else fault_assumed
    tau_b = auxiliary_law(state, ref, gains, hydro)
    return project_input(allocate_damped(tau_b, fault, layout, epsilon), u_prev, limits, dt)
