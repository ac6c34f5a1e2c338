"""Planar 3-DOF vehicle model: kinematics, rigid-body/hydrodynamic forces, RK4 plant.

State vector layout is ``x = [x, y, psi, u, v, r]``: Earth-fixed pose followed
by body-fixed velocities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

HYDRO_SCHEMA = "almpc.hydro"
HYDRO_SCHEMA_VERSION = 1


class IntegrationError(RuntimeError):
    """Raised when the plant integrator produces a non-finite state."""


def wrap_angle(angle):
    """Map an angle (scalar or array) to the half-open interval (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rotation(psi: float) -> np.ndarray:
    """Earth-from-body rotation ``J(psi)`` for the planar pose."""
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(r: float) -> np.ndarray:
    """Yaw-rate generator ``S(r)`` with ``d/dt J(psi) = J(psi) S(r)``."""
    return np.array([[0.0, -r, 0.0], [r, 0.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class VehicleState:
    eta: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float).reshape(3)
        nu = np.asarray(self.nu, dtype=float).reshape(3)
        if not (np.all(np.isfinite(eta)) and np.all(np.isfinite(nu))):
            raise ValueError("vehicle state must be finite")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "nu", nu)

    @classmethod
    def zero(cls) -> "VehicleState":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, x) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        return cls(x[:3], x[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.eta, self.nu])

    @property
    def psi(self) -> float:
        return float(self.eta[2])

    @property
    def eta_dot(self) -> np.ndarray:
        return rotation(self.psi) @ self.nu


@dataclass(frozen=True)
class HydroModel:
    """Inertia and damping coefficients.

    ``M`` may carry a sway-yaw coupling ``m23 = m32``; surge is assumed
    decoupled (``m12 = m13 = 0``), which is the usual port-starboard symmetric
    hull form. Damping is ``D(nu) = D_lin + diag(D_quad * |nu|)``.
    """

    M: np.ndarray
    D_lin: np.ndarray
    D_quad: np.ndarray
    nu_bound: np.ndarray = field(default_factory=lambda: np.array([2.0, 2.0, 3.0]))
    version: int = HYDRO_SCHEMA_VERSION

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float).reshape(3, 3)
        D_lin = np.asarray(self.D_lin, dtype=float).reshape(3, 3)
        D_quad = np.asarray(self.D_quad, dtype=float).reshape(3)
        nu_bound = np.asarray(self.nu_bound, dtype=float).reshape(3)
        if not np.allclose(M, M.T, rtol=0.0, atol=1e-12):
            raise ValueError("inertia matrix must be symmetric")
        if np.min(np.linalg.eigvalsh(M)) <= 0.0:
            raise ValueError("inertia matrix must be positive definite")
        if M[0, 1] != 0.0 or M[0, 2] != 0.0:
            raise ValueError("surge must be decoupled from sway/yaw in M")
        if np.any(D_quad < 0.0):
            raise ValueError("quadratic damping coefficients must be non-negative")
        if np.any(nu_bound <= 0.0):
            raise ValueError("operating-range bounds must be positive")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "D_lin", D_lin)
        object.__setattr__(self, "D_quad", D_quad)
        object.__setattr__(self, "nu_bound", nu_bound)
        if self.d_min <= 0.0:
            raise ValueError("linear damping must be positive definite")
        object.__setattr__(self, "M_inv", np.linalg.inv(M))

    @property
    def d_min(self) -> float:
        """Uniform lower bound on ``z' D(nu) z / |z|^2`` (quadratic terms only add)."""
        return float(np.min(np.linalg.eigvalsh(0.5 * (self.D_lin + self.D_lin.T))))

    @classmethod
    def from_dict(cls, data: dict) -> "HydroModel":
        if data.get("schema", HYDRO_SCHEMA) != HYDRO_SCHEMA:
            raise ValueError(f"not a hydro parameter file: schema={data.get('schema')!r}")
        version = int(data.get("version", HYDRO_SCHEMA_VERSION))
        if version != HYDRO_SCHEMA_VERSION:
            raise ValueError(f"unsupported hydro schema version {version}")
        kwargs = dict(M=data["M"], D_lin=data["D_lin"], D_quad=data["D_quad"], version=version)
        if "nu_bound" in data:
            kwargs["nu_bound"] = data["nu_bound"]
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "schema": HYDRO_SCHEMA,
            "version": self.version,
            "M": self.M.tolist(),
            "D_lin": self.D_lin.tolist(),
            "D_quad": self.D_quad.tolist(),
            "nu_bound": self.nu_bound.tolist(),
        }


def load_hydro(path: str | Path | None = None) -> HydroModel:
    """Load a hydrodynamic parameter file; ``None`` loads the packaged default."""
    if path is None:
        text = resources.files("almpc").joinpath("data/hydro_v1.json").read_text()
    else:
        text = Path(path).read_text()
    return HydroModel.from_dict(json.loads(text))


def default_hydro() -> HydroModel:
    return load_hydro(None)


def coriolis(nu, hydro: HydroModel) -> np.ndarray:
    """Skew-symmetric Coriolis-centripetal matrix (rigid body plus added mass)."""
    u, v, r = nu
    M = hydro.M
    a = M[1, 1] * v + M[1, 2] * r
    b = M[0, 0] * u
    return np.array([[0.0, 0.0, -a], [0.0, 0.0, b], [a, -b, 0.0]])


def damping(nu, hydro: HydroModel) -> np.ndarray:
    return hydro.D_lin + np.diag(hydro.D_quad * np.abs(np.asarray(nu, dtype=float)))


def hydro_force(nu, hydro: HydroModel) -> np.ndarray:
    """``C(nu) nu + D(nu) nu``."""
    nu = np.asarray(nu, dtype=float)
    return coriolis(nu, hydro) @ nu + damping(nu, hydro) @ nu


def hydro_force_jacobian(nu, hydro: HydroModel) -> np.ndarray:
    """Jacobian of ``C(nu) nu + D(nu) nu`` with respect to ``nu``."""
    u, v, r = nu
    M = hydro.M
    m11, m22, m23 = M[0, 0], M[1, 1], M[1, 2]
    a = m22 * v + m23 * r
    # C(nu) nu = [-a r, m11 u r, a u - m11 u v]
    Jc = np.array(
        [
            [0.0, -m22 * r, -m23 * r - a],
            [m11 * r, 0.0, m11 * u],
            [a - m11 * v, m22 * u - m11 * u, m23 * u],
        ]
    )
    Jd = hydro.D_lin + np.diag(2.0 * hydro.D_quad * np.abs(nu))
    return Jc + Jd


def state_derivative(state, tau, w, hydro: HydroModel) -> np.ndarray:
    """Continuous-time plant ``x_dot = f(x, tau) `` with additive generalized disturbance."""
    x = state.as_vector() if isinstance(state, VehicleState) else np.asarray(state, dtype=float)
    nu = x[3:6]
    eta_dot = rotation(x[2]) @ nu
    nu_dot = hydro.M_inv @ (np.asarray(tau, dtype=float) + np.asarray(w, dtype=float) - hydro_force(nu, hydro))
    return np.concatenate([eta_dot, nu_dot])


def state_derivative_batch(X: np.ndarray, tau: np.ndarray, hydro: HydroModel) -> np.ndarray:
    """Row-wise ``f(x, tau)`` for a stack of states ``X`` (n, 6); ``tau`` is (3,) or (n, 3)."""
    psi = X[:, 2]
    u, v, r = X[:, 3], X[:, 4], X[:, 5]
    c, s = np.cos(psi), np.sin(psi)
    M = hydro.M
    a = M[1, 1] * v + M[1, 2] * r
    b = M[0, 0] * u
    cnu = np.stack([-a * r, b * r, a * u - b * v], axis=1)
    nu = X[:, 3:6]
    dnu = nu @ hydro.D_lin.T + hydro.D_quad * np.abs(nu) * nu
    out = np.empty_like(X)
    out[:, 0] = c * u - s * v
    out[:, 1] = s * u + c * v
    out[:, 2] = r
    out[:, 3:6] = (tau - cnu - dnu) @ hydro.M_inv.T
    return out


def rk4_step(x: np.ndarray, tau, w, dt: float, hydro: HydroModel) -> np.ndarray:
    k1 = state_derivative(x, tau, w, hydro)
    k2 = state_derivative(x + 0.5 * dt * k1, tau, w, hydro)
    k3 = state_derivative(x + 0.5 * dt * k2, tau, w, hydro)
    k4 = state_derivative(x + dt * k3, tau, w, hydro)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_batch(X: np.ndarray, tau, dt: float, hydro: HydroModel) -> np.ndarray:
    k1 = state_derivative_batch(X, tau, hydro)
    k2 = state_derivative_batch(X + 0.5 * dt * k1, tau, hydro)
    k3 = state_derivative_batch(X + 0.5 * dt * k2, tau, hydro)
    k4 = state_derivative_batch(X + dt * k3, tau, hydro)
    return X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_plant(state: VehicleState, tau, w, dt: float, hydro: HydroModel, substeps: int = 1) -> VehicleState:
    """Advance the plant by ``dt`` with ``tau`` and ``w`` held constant.

    The interval is split into ``substeps`` classical RK4 steps.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x = state.as_vector()
    h = dt / substeps
    for _ in range(substeps):
        x = rk4_step(x, tau, w, h, hydro)
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"plant integration blew up (dt={dt}, tau={np.asarray(tau).tolist()})")
    return VehicleState.from_vector(x)


def kinetic_energy(nu, hydro: HydroModel) -> float:
    nu = np.asarray(nu, dtype=float)
    return 0.5 * float(nu @ hydro.M @ nu)


class Disturbance:
    """Generalized-force disturbance, zero by default.

    With ``bound > 0`` the disturbance is a piecewise-constant uniform random
    sequence in ``[-bound, bound]`` per axis, redrawn once per control period
    from a dedicated seeded generator.
    """

    def __init__(self, bound=0.0, seed: int = 0):
        self.bound = np.broadcast_to(np.asarray(bound, dtype=float), (3,)).copy()
        if np.any(self.bound < 0.0):
            raise ValueError("disturbance bound must be non-negative")
        self._rng = np.random.default_rng(seed)

    @property
    def active(self) -> bool:
        return bool(np.any(self.bound > 0.0))

    def sample(self) -> np.ndarray:
        if not self.active:
            return np.zeros(3)
        return self._rng.uniform(-self.bound, self.bound)
