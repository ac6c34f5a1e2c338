"""Mode-conditioned UKF bank and the Markov/likelihood posterior over fault modes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from almpc.allocation import FaultParameters, ThrusterLayout, effective_matrix
from almpc.dynamics import HydroModel, rk4_step_batch, wrap_angle

LOG_2PI = float(np.log(2.0 * np.pi))
PRIOR_FLOOR = 1e-300


class FilterDivergenceError(RuntimeError):
    """A UKF covariance (or innovation covariance) stopped being positive definite."""


def default_modes() -> list[tuple[str, FaultParameters]]:
    """Nominal, thruster 1 lost, thruster 3 derated to 30% and turned by 15 deg."""
    gamma3 = np.ones(4)
    gamma3[2] = 0.3
    theta3 = np.zeros(4)
    theta3[2] = np.deg2rad(15.0)
    gamma2 = np.ones(4)
    gamma2[0] = 0.0
    return [
        ("I", FaultParameters.nominal(4)),
        ("II", FaultParameters(gamma2, np.zeros(4))),
        ("III", FaultParameters(gamma3, theta3)),
    ]


def markov_matrix(n: int, t_diag: float) -> np.ndarray:
    """Symmetric persistence matrix: ``t_diag`` on the diagonal, the rest spread evenly."""
    if not 0.0 <= t_diag <= 1.0:
        raise ValueError("t_diag must lie in [0, 1]")
    if n == 1:
        return np.ones((1, 1))
    T = np.full((n, n), (1.0 - t_diag) / (n - 1))
    np.fill_diagonal(T, t_diag)
    return T


@dataclass(frozen=True)
class ModeLibrary:
    modes: tuple = field(default_factory=lambda: tuple(default_modes()))
    t_diag: float = 0.98

    def __post_init__(self):
        modes = tuple((str(i), f) for i, f in self.modes)
        if len({i for i, _ in modes}) != len(modes):
            raise ValueError("mode ids must be unique")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "transition", markov_matrix(len(modes), self.t_diag))

    def __len__(self) -> int:
        return len(self.modes)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.modes]

    @property
    def params(self) -> list[FaultParameters]:
        return [f for _, f in self.modes]

    def index(self, mode_id: str) -> int:
        return self.ids.index(mode_id)

    def index_of(self, fault: FaultParameters) -> int | None:
        """Library index of an exact parameter match, else None."""
        for k, f in enumerate(self.params):
            if f == fault:
                return k
        return None


# ---------------------------------------------------------------------------
# unscented filter


@dataclass(frozen=True)
class UtParams:
    alpha: float = 1e-1
    beta: float = 2.0
    kappa: float = 0.0


def sigma_weights(n: int, ut: UtParams = UtParams()):
    """Scaled-UT weights ``(Wm, Wc, lambda)`` for ``2n+1`` points."""
    lam = ut.alpha**2 * (n + ut.kappa) - n
    Wm = np.full(2 * n + 1, 0.5 / (n + lam))
    Wc = Wm.copy()
    Wm[0] = lam / (n + lam)
    Wc[0] = Wm[0] + (1.0 - ut.alpha**2 + ut.beta)
    return Wm, Wc, lam


def _chol(P: np.ndarray, what: str) -> np.ndarray:
    P = 0.5 * (P + P.T)
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(P)))))
    try:
        return np.linalg.cholesky(P + jitter * np.eye(P.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise FilterDivergenceError(f"{what} is not positive definite") from exc


def sigma_points(mean: np.ndarray, cov: np.ndarray, lam: float) -> np.ndarray:
    n = mean.size
    L = _chol((n + lam) * cov, "state covariance")
    return np.vstack([mean, mean + L.T, mean - L.T])


@dataclass(frozen=True)
class UkfState:
    mean: np.ndarray
    cov: np.ndarray
    Q: np.ndarray = field(default_factory=lambda: np.diag([0.01, 0.01, 0.01, 0.005, 0.005, 0.005]))
    R: np.ndarray = field(default_factory=lambda: np.diag([0.1, 0.1, 0.1, 0.03, 0.03, 0.03]))

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(-1))
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))


ProcessModel = Callable[[np.ndarray], np.ndarray]


def vehicle_process(u, mode: FaultParameters, dt: float, hydro: HydroModel, layout: ThrusterLayout) -> ProcessModel:
    """Batch one-period RK4 propagation with the mode's generalized force held."""
    tau = effective_matrix(layout, mode) @ np.asarray(u, dtype=float)
    return lambda X: rk4_step_batch(X, tau, dt, hydro)


def ukf_step(ukf: UkfState, process: ProcessModel, measurement, ut: UtParams = UtParams(),
             s_jitter: float = 1e-9, angle_index: int | None = 2):
    """Predict through ``process`` and correct with a full-state measurement.

    With the identity measurement map the predicted output equals the predicted
    mean and the state/output cross covariance equals the predicted covariance,
    so the correction is written in closed form. ``angle_index`` marks a
    measurement component whose innovation is wrapped to (-pi, pi].

    Returns ``(updated UkfState, innovation e, innovation covariance S)``.
    """
    n = ukf.mean.size
    Wm, Wc, lam = sigma_weights(n, ut)
    X = sigma_points(ukf.mean, ukf.cov, lam)
    Xp = process(X)
    if not np.all(np.isfinite(Xp)):
        raise FilterDivergenceError("non-finite sigma point after propagation")
    m_pred = Wm @ Xp
    dX = Xp - m_pred
    P_pred = (dX.T * Wc) @ dX + ukf.Q
    P_pred = 0.5 * (P_pred + P_pred.T)

    y = np.asarray(measurement, dtype=float)
    e = y - m_pred
    if angle_index is not None:
        e[angle_index] = wrap_angle(e[angle_index])
    S = P_pred + ukf.R + s_jitter * np.eye(n)
    Ls = _chol(S, "innovation covariance")
    # K = P_pred S^-1 via two triangular solves
    K = np.linalg.solve(Ls.T, np.linalg.solve(Ls, P_pred.T)).T
    mean = m_pred + K @ e
    cov = P_pred - K @ S @ K.T
    cov = 0.5 * (cov + cov.T)
    return UkfState(mean, cov, ukf.Q, ukf.R), e, S


# ---------------------------------------------------------------------------
# belief recursion


def log_likelihood(e, S) -> float:
    """Gaussian log-density of innovation ``e`` under covariance ``S``."""
    e = np.asarray(e, dtype=float)
    S = np.asarray(S, dtype=float)
    try:
        L = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError as exc:
        raise FilterDivergenceError("innovation covariance is not positive definite") from exc
    z = np.linalg.solve(L, e)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (float(z @ z) + logdet + e.size * LOG_2PI)


def accumulate_likelihood(ell_bar_prev, ell, rho: float):
    if not 0.0 < rho <= 1.0:
        raise ValueError("forgetting factor must lie in (0, 1]")
    return rho * ell_bar_prev + ell


def mix_prior(p_prev, T) -> np.ndarray:
    """``p~_i = sum_j T_ji p_j``."""
    return np.asarray(T, dtype=float).T @ np.asarray(p_prev, dtype=float)


def posterior_update(p_tilde, ell_bar) -> np.ndarray:
    """Bayes update in the log domain with a max shift."""
    log_post = np.log(np.maximum(np.asarray(p_tilde, dtype=float), PRIOR_FLOOR)) + np.asarray(ell_bar, dtype=float)
    w = np.exp(log_post - np.max(log_post))
    return w / np.sum(w)


@dataclass(frozen=True)
class ModeBelief:
    p: np.ndarray
    ell_bar: np.ndarray
    rho: float = 0.9995

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        ell = np.asarray(self.ell_bar, dtype=float)
        if np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("posterior must be a probability vector")
        if not np.all(np.isfinite(ell)):
            raise ValueError("accumulated log-likelihoods must be finite")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "ell_bar", ell)

    @classmethod
    def initial(cls, n: int = 3, start: int = 0, rho: float = 0.9995) -> "ModeBelief":
        p = np.zeros(n)
        p[start] = 1.0
        return cls(p, np.zeros(n), rho)

    def update(self, ell, T) -> "ModeBelief":
        ell_bar = accumulate_likelihood(self.ell_bar, np.asarray(ell, dtype=float), self.rho)
        p = posterior_update(mix_prior(self.p, T), ell_bar)
        return ModeBelief(p, ell_bar, self.rho)

    @property
    def map_index(self) -> int:
        return int(np.argmax(self.p))


@dataclass
class EstimatorStep:
    belief: ModeBelief
    innovations: np.ndarray  # (n_modes, 6)
    innovation_covs: np.ndarray  # (n_modes, 6, 6)
    log_likelihoods: np.ndarray


class ModeEstimator:
    """One UKF per library mode feeding a shared belief."""

    def __init__(self, library: ModeLibrary, x0, hydro: HydroModel, layout: ThrusterLayout, dt: float,
                 P0=None, Q=None, R=None, rho: float = 0.9995, start_mode: int = 0, s_jitter: float = 1e-9,
                 ut: UtParams = UtParams()):
        self.library = library
        self.hydro = hydro
        self.layout = layout
        self.dt = dt
        self.s_jitter = s_jitter
        self.ut = ut
        x0 = np.asarray(x0, dtype=float)
        kwargs = {}
        if Q is not None:
            kwargs["Q"] = Q
        if R is not None:
            kwargs["R"] = R
        P0 = np.diag([0.1, 0.1, 0.1, 0.03, 0.03, 0.03]) if P0 is None else P0
        self.filters = [UkfState(x0, P0, **kwargs) for _ in library.modes]
        self.belief = ModeBelief.initial(len(library), start_mode, rho)

    def step(self, u_applied, measurement) -> EstimatorStep:
        n = len(self.library)
        E = np.empty((n, 6))
        Ss = np.empty((n, 6, 6))
        ell = np.empty(n)
        for k, mode in enumerate(self.library.params):
            f = vehicle_process(u_applied, mode, self.dt, self.hydro, self.layout)
            self.filters[k], E[k], Ss[k] = ukf_step(self.filters[k], f, measurement, self.ut, self.s_jitter)
            ell[k] = log_likelihood(E[k], Ss[k])
        self.belief = self.belief.update(ell, self.library.transition)
        return EstimatorStep(self.belief, E, Ss, ell)
