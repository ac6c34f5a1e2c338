"""Thruster geometry, fault parameterization and force/command mappings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class RankDeficiencyError(np.linalg.LinAlgError):
    """Undamped allocation requested for a rank-deficient effective mapping."""


def _planar_rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class ThrusterLayout:
    """Horizontal thruster positions (body frame, m) and unit force directions."""

    positions: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        dirs = np.asarray(self.directions, dtype=float).reshape(-1, 2)
        if pos.shape != dirs.shape:
            raise ValueError("positions and directions must have matching shapes")
        if not np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12):
            raise ValueError("thruster directions must be unit vectors")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "directions", dirs)
        if np.linalg.matrix_rank(self.nominal) < 3:
            raise ValueError("nominal allocation must have rank 3")

    @classmethod
    def vectored_x(cls, lx: float = 0.35, ly: float = 0.25) -> "ThrusterLayout":
        """Four thrusters at ``(+-lx, +-ly)`` angled at +-45 deg to surge.

        Numbering: 1 front-port, 2 front-starboard, 3 aft-port, 4 aft-starboard
        (y positive to starboard). Each diagonal pair shares a direction so
        that all four produce yaw moment of equal magnitude.
        """
        c = np.sqrt(0.5)
        positions = [[lx, ly], [lx, -ly], [-lx, ly], [-lx, -ly]]
        directions = [[c, -c], [c, c], [c, c], [c, -c]]
        return cls(np.array(positions), np.array(directions))

    @property
    def n_thrusters(self) -> int:
        return self.positions.shape[0]

    @property
    def nominal(self) -> np.ndarray:
        return _columns(self.positions, self.directions)


def _columns(positions: np.ndarray, directions: np.ndarray) -> np.ndarray:
    moment = positions[:, 0] * directions[:, 1] - positions[:, 1] * directions[:, 0]
    return np.vstack([directions[:, 0], directions[:, 1], moment])


@dataclass(frozen=True)
class FaultParameters:
    """Per-thruster effectiveness ``gamma`` in [0, 1] and misalignment ``theta`` (rad)."""

    gamma: np.ndarray = field(default_factory=lambda: np.ones(4))
    theta: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float).reshape(-1)
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if gamma.shape != theta.shape:
            raise ValueError("gamma and theta must have the same length")
        if np.any(gamma < 0.0) or np.any(gamma > 1.0):
            raise ValueError("effectiveness must lie in [0, 1]")
        if np.any(np.abs(theta) > np.pi):
            raise ValueError("misalignment angles must satisfy |theta| <= pi")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def nominal(cls, n: int = 4) -> "FaultParameters":
        return cls(np.ones(n), np.zeros(n))

    @property
    def dead(self) -> np.ndarray:
        """Boolean mask of thrusters with zero effectiveness."""
        return self.gamma == 0.0

    def __eq__(self, other):
        if not isinstance(other, FaultParameters):
            return NotImplemented
        return np.array_equal(self.gamma, other.gamma) and np.array_equal(self.theta, other.theta)

    def __hash__(self):
        return hash((self.gamma.tobytes(), self.theta.tobytes()))


@dataclass(frozen=True)
class InputLimits:
    u_min: np.ndarray = field(default_factory=lambda: np.full(4, -500.0))
    u_max: np.ndarray = field(default_factory=lambda: np.full(4, 500.0))
    rate_max: float = 2000.0

    def __post_init__(self):
        u_min = np.asarray(self.u_min, dtype=float).reshape(-1)
        u_max = np.asarray(self.u_max, dtype=float).reshape(-1)
        if u_min.shape != u_max.shape or np.any(u_min >= u_max):
            raise ValueError("need u_min < u_max componentwise")
        if not self.rate_max > 0.0:
            raise ValueError("rate_max must be positive")
        object.__setattr__(self, "u_min", u_min)
        object.__setattr__(self, "u_max", u_max)
        object.__setattr__(self, "rate_max", float(self.rate_max))


def allocation_matrix(layout: ThrusterLayout, theta) -> np.ndarray:
    """Rotated mapping: each force direction turned in-plane by ``theta_i``.

    The moment row is recomputed from the rotated direction, so the column
    stays physically consistent with the thruster position.
    """
    theta = np.asarray(theta, dtype=float)
    dirs = layout.directions.copy()
    for i in np.flatnonzero(theta):
        dirs[i] = _planar_rotation(theta[i]) @ dirs[i]
    return _columns(layout.positions, dirs)


def effective_matrix(layout: ThrusterLayout, fault: FaultParameters) -> np.ndarray:
    """``T(theta) diag(gamma)``."""
    return allocation_matrix(layout, fault.theta) * fault.gamma


def generalized_force(u, fault: FaultParameters, layout: ThrusterLayout) -> np.ndarray:
    return effective_matrix(layout, fault) @ np.asarray(u, dtype=float)


def damped_pseudoinverse(B: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """``B' (B B' + eps I)^-1``; raises :class:`RankDeficiencyError` when singular with eps=0."""
    if epsilon < 0.0:
        raise ValueError("epsilon must be non-negative")
    G = B @ B.T + epsilon * np.eye(B.shape[0])
    if epsilon == 0.0 and np.linalg.matrix_rank(G) < B.shape[0]:
        raise RankDeficiencyError("effective allocation is rank deficient; use epsilon > 0")
    return np.linalg.solve(G, B).T


def allocate_damped(tau, fault: FaultParameters, layout: ThrusterLayout, epsilon: float = 1e-6) -> np.ndarray:
    """Damped least-squares thruster command reproducing ``tau``.

    Dead thrusters (``gamma_i = 0``) receive exactly zero.
    """
    B = effective_matrix(layout, fault)
    u = damped_pseudoinverse(B, epsilon) @ np.asarray(tau, dtype=float)
    u[fault.dead] = 0.0
    return u


def project_input(u_raw, u_prev, limits: InputLimits, dt: float) -> np.ndarray:
    """Clamp to the amplitude box intersected with the rate box around ``u_prev``."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    u_prev = np.clip(np.asarray(u_prev, dtype=float), limits.u_min, limits.u_max)
    step = limits.rate_max * dt
    lo = np.maximum(limits.u_min, u_prev - step)
    hi = np.minimum(limits.u_max, u_prev + step)
    return np.clip(np.asarray(u_raw, dtype=float), lo, hi)
