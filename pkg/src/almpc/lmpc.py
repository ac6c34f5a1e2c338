"""Mode-conditioned Lyapunov-constrained MPC.

The predictor is an explicit-Euler step of the augmented error dynamics in
``xi = [eta_tilde, s, d]``. The optimal control problem is condensed (single
shooting): the Euler dynamics are satisfied by forward rollout, so the only
decision variables are the ``N`` thruster commands. It is solved by a
Gauss-Newton SQP whose subproblems go to :func:`almpc.qp.solve_qp`.

The first-step descent constraint is convex in the first input (the one-step
map is affine in the input and ``V`` is quadratic at fixed heading), which is
what makes the exact feasibility test and the final safeguard below possible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from almpc.allocation import (
    FaultParameters,
    InputLimits,
    ThrusterLayout,
    allocate_damped,
    effective_matrix,
    project_input,
)
from almpc.backstepping import (
    AugmentedError,
    BackstepGains,
    ReferenceSignal,
    auxiliary_law,
    augmented_error,
    lyapunov_value,
    state_from_error,
)
from almpc.dynamics import (
    HydroModel,
    VehicleState,
    hydro_force,
    hydro_force_jacobian,
    integrate_plant,
    rotation,
    skew,
)
from almpc.qp import solve_qp

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
FALLBACK = "infeasible-fallback"

_S1 = skew(1.0)


class SolverDivergenceError(RuntimeError):
    """NaN or Inf appeared in the SQP iterates."""


def _sqrt_factor(Q: np.ndarray) -> np.ndarray:
    """Upper factor ``L'`` with ``Q = L L'`` so that ``|L' x|^2 = x'Qx``."""
    return np.linalg.cholesky(Q).T


@dataclass
class OcpConfig:
    N: int = 10
    dt: float = 0.1
    Q_eta: np.ndarray = field(default_factory=lambda: np.diag([1e5, 1e5, 1e3]))
    Q_s: np.ndarray = field(default_factory=lambda: np.diag([1e2, 1e2, 1e2]))
    Q_d: np.ndarray = field(default_factory=lambda: np.eye(3))
    R_du: np.ndarray = field(default_factory=lambda: 1e-4 * np.eye(4))
    # small weight on |u|: the cost is otherwise flat along the allocation null space
    R_u: np.ndarray = field(default_factory=lambda: 1e-5 * np.eye(4))
    alpha: float = 0.05
    # None -> derived from the Lyapunov function, see terminal_level()
    c: float | None = None
    terminal_ball: float = 0.05
    terminal_penalty: float = 1e4
    max_iter: int = 30
    kkt_tol: float = 1e-6
    line_search_beta: float = 0.5
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.c is not None and self.c <= 0.0:
            raise ValueError("terminal level c must be positive")
        for name in ("Q_eta", "Q_s", "Q_d", "R_du"):
            Q = np.asarray(getattr(self, name), dtype=float)
            if not np.allclose(Q, Q.T) or np.min(np.linalg.eigvalsh(Q)) <= 0.0:
                raise ValueError(f"{name} must be symmetric positive definite")
            setattr(self, name, Q)
        R_u = np.asarray(self.R_u, dtype=float)
        if not np.allclose(R_u, R_u.T) or np.min(np.linalg.eigvalsh(R_u)) < 0.0:
            raise ValueError("R_u must be symmetric positive semidefinite")
        self.R_u = R_u


def terminal_level(gains: BackstepGains, hydro: HydroModel, bound: float = 0.05) -> float:
    """Worst-case ``V`` over ``|eta_tilde|_inf <= bound``, ``|s|_inf <= bound``, ``d = 0``.

    ``V`` is a convex quadratic, so the maximum over the box sits at a vertex;
    the heading dependence of the ``s`` term is bounded by ``lambda_max(M)``.
    """
    signs = np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1])).reshape(3, -1).T * bound
    v_eta = max(0.5 * float(e @ gains.Kp @ e) for e in signs)
    v_s = 0.5 * np.max(np.linalg.eigvalsh(hydro.M)) * 3.0 * bound**2
    return v_eta + v_s


# ---------------------------------------------------------------------------
# predictor


def error_dynamics(xi, tau, ref: ReferenceSignal, hydro: HydroModel, Lambda, jacobian: bool = False):
    """Time derivative of ``xi`` given the applied generalized force ``tau`` (bias excluded).

    Returns ``f`` or ``(f, F_xi, F_tau)`` when ``jacobian`` is set.
    """
    xi = np.asarray(xi, dtype=float)
    e, s, d = xi[0:3], xi[3:6], xi[6:9]
    J = rotation(ref.eta_d[2] + e[2])
    q = s + ref.eta_d_dot - e
    nu = J.T @ q
    u, v, r = nu
    Minv = hydro.M_inv
    nu_dot = Minv @ (tau + d - hydro_force(nu, hydro))
    w = np.array([-r * v, r * u, 0.0]) + nu_dot
    eta_ddot = J @ w
    f = np.empty(9)
    f[0:3] = s - e
    f[3:6] = eta_ddot - ref.eta_d_ddot + s - e
    f[6:9] = -(Lambda @ d)
    if not jacobian:
        return f

    dnu_de = -J.T.copy()
    dnu_de[:, 2] -= _S1 @ nu
    W_nu = np.array([[0.0, -r, -v], [r, 0.0, u], [0.0, 0.0, 0.0]]) - Minv @ hydro_force_jacobian(nu, hydro)
    JW = J @ W_nu
    deta_de = JW @ dnu_de
    deta_de[:, 2] += J @ (_S1 @ w)
    JM = J @ Minv
    I3 = np.eye(3)
    F = np.zeros((9, 9))
    F[0:3, 0:3] = -I3
    F[0:3, 3:6] = I3
    F[3:6, 0:3] = deta_de - I3
    F[3:6, 3:6] = JW @ J.T + I3
    F[3:6, 6:9] = JM
    F[6:9, 6:9] = -Lambda
    F_tau = np.zeros((9, 3))
    F_tau[3:6] = JM
    return f, F, F_tau


def predict_step(xi, u, mode: FaultParameters, ref: ReferenceSignal, dt: float, hydro: HydroModel,
                 layout: ThrusterLayout, gains: BackstepGains) -> AugmentedError:
    """One explicit-Euler step of the augmented error model under mode ``mode``."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = xi.as_vector() if isinstance(xi, AugmentedError) else np.asarray(xi, dtype=float)
    tau = effective_matrix(layout, mode) @ np.asarray(u, dtype=float)
    return AugmentedError.from_vector(x + dt * error_dynamics(x, tau, ref, hydro, gains.Lambda))


def _lyap_grad(xi: np.ndarray, psi: float, gains: BackstepGains, hydro: HydroModel) -> np.ndarray:
    e, s, d = xi[0:3], xi[3:6], xi[6:9]
    J = rotation(psi)
    g = np.empty(9)
    g[0:3] = gains.Kp @ e
    g[2] += float(s @ J @ _S1 @ hydro.M @ J.T @ s)
    g[3:6] = J @ hydro.M @ J.T @ s
    g[6:9] = gains.Pd @ d
    return g


def _lyap(xi: np.ndarray, psi: float, gains: BackstepGains, hydro: HydroModel) -> float:
    return lyapunov_value(AugmentedError.from_vector(xi), gains, hydro, psi)


# ---------------------------------------------------------------------------
# optimal control problem


class LmpcProblem:
    """One OCP instance: data plus evaluation of cost, constraints and derivatives.

    Decision vector ``U`` stacks ``N`` four-thruster commands (``U[4i:4i+4] = u_i``).
    Commands of dead thrusters are not decision variables: they follow the
    fastest rate-feasible ramp from ``u_prev`` to zero (they produce no force in
    this mode's model, but the returned sequence must stay rate feasible).
    """

    def __init__(self, xi0, refs, mode: FaultParameters, u_prev, cfg: OcpConfig, gains: BackstepGains,
                 hydro: HydroModel, layout: ThrusterLayout, limits: InputLimits,
                 contraction: bool = True, terminal: bool = True):
        self.xi0 = xi0.as_vector() if isinstance(xi0, AugmentedError) else np.asarray(xi0, dtype=float)
        if len(refs) < cfg.N + 1:
            raise ValueError(f"need {cfg.N + 1} horizon references, got {len(refs)}")
        self.refs = list(refs[: cfg.N + 1])
        self.mode = mode
        self.cfg = cfg
        self.gains = gains
        self.hydro = hydro
        self.layout = layout
        self.limits = limits
        self.contraction = contraction
        self.terminal = terminal
        self.B = effective_matrix(layout, mode)
        nu_ = layout.n_thrusters
        self.nu = nu_
        self.u_prev = np.clip(np.asarray(u_prev, dtype=float), limits.u_min, limits.u_max)
        self.alive = ~mode.dead
        self.c = terminal_level(gains, hydro, cfg.terminal_ball) if cfg.c is None else cfg.c
        N = cfg.N
        self.free = np.tile(self.alive, N)
        self.rate_step = limits.rate_max * cfg.dt
        steps = self.rate_step * np.arange(1, N + 1)[:, None]
        ramp = np.sign(self.u_prev) * np.maximum(np.abs(self.u_prev) - steps, 0.0)
        self.pinned = np.where(self.alive, 0.0, ramp).ravel()
        self.lb = np.where(self.free, np.tile(limits.u_min, N), self.pinned)
        self.ub = np.where(self.free, np.tile(limits.u_max, N), self.pinned)
        self.V0 = _lyap(self.xi0, self._psi(0, self.xi0), gains, hydro)
        self.required_decrease = cfg.alpha * float(self.xi0[0:3] @ self.xi0[0:3])
        self._Lq = [_sqrt_factor(cfg.Q_eta), _sqrt_factor(cfg.Q_s), _sqrt_factor(cfg.Q_d)]
        self._Lr = _sqrt_factor(cfg.R_du)
        w, V = np.linalg.eigh(cfg.R_u)
        self._Lu = (V * np.sqrt(np.maximum(w, 0.0))).T
        h = np.sqrt(0.5)
        self._Lkp = h * _sqrt_factor(gains.Kp)
        self._Lm = h * _sqrt_factor(hydro.M)
        self._Lpd = h * _sqrt_factor(gains.Pd)

    # -- sizes ------------------------------------------------------------
    @property
    def n_var(self) -> int:
        return self.nu * self.cfg.N

    @property
    def n_eq(self) -> int:
        return 9 * self.cfg.N

    @property
    def n_box(self) -> int:
        return 2 * self.n_var

    @property
    def n_rate(self) -> int:
        return 2 * self.n_var

    @property
    def n_ineq(self) -> int:
        return self.n_box + self.n_rate + int(self.contraction) + int(self.terminal)

    def _psi(self, i: int, xi: np.ndarray) -> float:
        return float(self.refs[i].eta_d[2] + xi[2])

    # -- evaluation ---------------------------------------------------------
    def rollout(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=float).reshape(self.cfg.N, self.nu)
        xs = np.empty((self.cfg.N + 1, 9))
        xs[0] = self.xi0
        dt, Lam = self.cfg.dt, self.gains.Lambda
        for i in range(self.cfg.N):
            xs[i + 1] = xs[i] + dt * error_dynamics(xs[i], self.B @ U[i], self.refs[i], self.hydro, Lam)
        return xs

    def dynamics_defects(self, U, xs) -> np.ndarray:
        """Residuals of the Euler equality constraints (zero for a rollout)."""
        U = np.asarray(U, dtype=float).reshape(self.cfg.N, self.nu)
        out = np.empty((self.cfg.N, 9))
        for i in range(self.cfg.N):
            f = error_dynamics(xs[i], self.B @ U[i], self.refs[i], self.hydro, self.gains.Lambda)
            out[i] = xs[i + 1] - xs[i] - self.cfg.dt * f
        return out.ravel()

    def stage_cost(self, xi: np.ndarray) -> float:
        cfg = self.cfg
        e, s, d = xi[0:3], xi[3:6], xi[6:9]
        return float(e @ cfg.Q_eta @ e + s @ cfg.Q_s @ s + d @ cfg.Q_d @ d)

    def cost(self, U, xs=None) -> float:
        U = np.asarray(U, dtype=float)
        xs = self.rollout(U) if xs is None else xs
        du = np.diff(np.concatenate([self.u_prev, U]).reshape(-1, self.nu), axis=0)
        total = sum(self.stage_cost(xs[i]) for i in range(self.cfg.N))
        total += float(np.einsum("ij,jk,ik->", du, self.cfg.R_du, du))
        Um = U.reshape(-1, self.nu)
        total += float(np.einsum("ij,jk,ik->", Um, self.cfg.R_u, Um))
        total += _lyap(xs[-1], self._psi(self.cfg.N, xs[-1]), self.gains, self.hydro)
        return total

    def descent(self, xs) -> float:
        """``V(xi_1) - V(xi_0) + alpha |eta_tilde_0|^2`` (must be <= 0)."""
        return _lyap(xs[1], self._psi(1, xs[1]), self.gains, self.hydro) - self.V0 + self.required_decrease

    def terminal_violation(self, xs) -> float:
        return _lyap(xs[-1], self._psi(self.cfg.N, xs[-1]), self.gains, self.hydro) - self.c

    def linearize(self, U):
        """Rollout plus Gauss-Newton residuals and first-order constraint data."""
        cfg, N, nu_ = self.cfg, self.cfg.N, self.nu
        U = np.asarray(U, dtype=float)
        Um = U.reshape(N, nu_)
        nvar = N * nu_
        xs = np.empty((N + 1, 9))
        xs[0] = self.xi0
        sens = np.zeros((N + 1, 9, nvar))
        for i in range(N):
            f, F, F_tau = error_dynamics(xs[i], self.B @ Um[i], self.refs[i], self.hydro, self.gains.Lambda, True)
            xs[i + 1] = xs[i] + cfg.dt * f
            sens[i + 1] = sens[i] + cfg.dt * (F @ sens[i])
            sens[i + 1][:, i * nu_:(i + 1) * nu_] += cfg.dt * (F_tau @ self.B)

        res, jac = [], []
        Lq_eta, Lq_s, Lq_d = self._Lq
        for i in range(1, N):
            res += [Lq_eta @ xs[i, 0:3], Lq_s @ xs[i, 3:6], Lq_d @ xs[i, 6:9]]
            jac += [Lq_eta @ sens[i, 0:3], Lq_s @ sens[i, 3:6], Lq_d @ sens[i, 6:9]]
        # input increments
        D = np.eye(nvar) - np.eye(nvar, k=-nu_)
        du = D @ U
        du[:nu_] -= self.u_prev
        Lr_big = np.kron(np.eye(N), self._Lr)
        res.append(Lr_big @ du)
        jac.append(Lr_big @ D)
        Lu_big = np.kron(np.eye(N), self._Lu)
        res.append(Lu_big @ U)
        jac.append(Lu_big)
        # terminal Lyapunov penalty
        rv, jv = self._v_residual(xs[N], sens[N], self._psi(N, xs[N]))
        res.append(rv)
        jac.append(jv)
        r = np.concatenate(res)
        Jr = np.vstack(jac)
        # stage 0 does not depend on U but is part of the reported cost
        lin = {"xs": xs, "r": r, "Jr": Jr, "cost": float(r @ r) + self.stage_cost(xs[0])}
        if self.contraction:
            lin["g"] = self.descent(xs)
            lin["dg"] = _lyap_grad(xs[1], self._psi(1, xs[1]), self.gains, self.hydro) @ sens[1]
            lin["Jv1"] = self._v_residual(xs[1], sens[1], self._psi(1, xs[1]))[1]
        if self.terminal:
            lin["h"] = self.terminal_violation(xs)
            lin["dh"] = _lyap_grad(xs[N], self._psi(N, xs[N]), self.gains, self.hydro) @ sens[N]
            lin["JvN"] = jv
        return lin

    def _v_residual(self, xi, S, psi):
        """``V = |r|^2`` written as a residual, with its Jacobian through sensitivities ``S``."""
        J = rotation(psi)
        r = np.concatenate([self._Lkp @ xi[0:3], self._Lm @ (J.T @ xi[3:6]), self._Lpd @ xi[6:9]])
        jm = self._Lm @ (J.T @ S[3:6]) + np.outer(self._Lm @ (-_S1 @ J.T @ xi[3:6]), S[2])
        return r, np.vstack([self._Lkp @ S[0:3], jm, self._Lpd @ S[6:9]])

    def linear_constraints(self, U):
        """Box and rate rows ``A p <= b`` for a step ``p`` from ``U`` (free variables only)."""
        N, nu_ = self.cfg.N, self.nu
        nvar = N * nu_
        I = np.eye(nvar)
        D = I - np.eye(nvar, k=-nu_)
        du = D @ U
        du[:nu_] -= self.u_prev
        # dead-thruster rows dropped: their command is pinned to zero
        keep = self.free
        A = np.vstack([I[keep], -I[keep], D[keep], -D[keep]])
        b = np.concatenate([
            (self.ub - U)[keep],
            (U - self.lb)[keep],
            (self.rate_step - du)[keep],
            (self.rate_step + du)[keep],
        ])
        return A, b

    def is_feasible(self, U, tol: float = 1e-9) -> bool:
        U = np.asarray(U, dtype=float)
        A, b = self.linear_constraints(U)
        return bool(np.all(b >= -tol))

    def project_sequence(self, U) -> np.ndarray:
        """Sequential box/rate projection starting from ``u_prev``; dead thrusters pinned."""
        Um = np.asarray(U, dtype=float).reshape(self.cfg.N, self.nu).copy()
        pinned = self.pinned.reshape(self.cfg.N, self.nu)
        prev = self.u_prev.copy()
        for i in range(self.cfg.N):
            lo = np.maximum(self.limits.u_min, prev - self.rate_step)
            hi = np.minimum(self.limits.u_max, prev + self.rate_step)
            Um[i] = np.where(self.alive, np.clip(Um[i], lo, hi), pinned[i])
            prev = Um[i]
        return Um.ravel()


def build_ocp(xi0, ref_horizon, mode: FaultParameters, u_prev, cfg: OcpConfig, gains: BackstepGains,
              hydro: HydroModel, layout: ThrusterLayout, limits: InputLimits,
              contraction: bool = True, terminal: bool = True) -> LmpcProblem:
    return LmpcProblem(xi0, ref_horizon, mode, u_prev, cfg, gains, hydro, layout, limits, contraction, terminal)


@dataclass
class OcpSolution:
    u_sequence: np.ndarray
    xi_sequence: np.ndarray
    first_step_descent: float
    status: str
    iterations: int = 0
    kkt_residual: float = float("nan")
    descent_margin: float = float("nan")
    terminal_violation: float = float("nan")
    cost: float = float("nan")

    @property
    def u0(self) -> np.ndarray:
        return self.u_sequence[0]


# ---------------------------------------------------------------------------
# solver


def _phase_one(ocp: LmpcProblem):
    """Minimize the (convex quadratic) descent function over the first-step input set.

    Returns the minimizing full sequence (first input held) and the minimum.
    """
    nu_ = ocp.nu
    alive = ocp.alive
    xi0, ref0, dt = ocp.xi0, ocp.refs[0], ocp.cfg.dt
    f0, _, F_tau = error_dynamics(xi0, np.zeros(3), ref0, ocp.hydro, ocp.gains.Lambda, True)
    c1 = xi0 + dt * f0
    G = dt * (F_tau @ ocp.B)[:, alive]
    J = rotation(ocp._psi(1, c1))
    P = np.zeros((9, 9))
    P[0:3, 0:3] = ocp.gains.Kp
    P[3:6, 3:6] = J @ ocp.hydro.M @ J.T
    P[6:9, 6:9] = ocp.gains.Pd
    H = G.T @ P @ G
    g = G.T @ P @ c1
    H = H + 1e-12 * (1.0 + np.max(np.abs(np.diag(H)))) * np.eye(H.shape[0])
    lo = np.maximum(ocp.limits.u_min, ocp.u_prev - ocp.rate_step)[alive]
    hi = np.minimum(ocp.limits.u_max, ocp.u_prev + ocp.rate_step)[alive]
    k = lo.size
    A = np.vstack([np.eye(k), -np.eye(k)])
    b = np.concatenate([hi, -lo])
    res = solve_qp(H, g, A, b, tol=1e-12)
    u0 = np.zeros(nu_)
    u0[alive] = np.clip(res.x, lo, hi)
    U = np.where(ocp.free, np.tile(u0, ocp.cfg.N), ocp.pinned)
    xs = ocp.rollout(U)
    return U, ocp.descent(xs)


def _safeguard(ocp: LmpcProblem, U: np.ndarray, U_feas: np.ndarray, target: float) -> np.ndarray:
    """Move ``U`` toward ``U_feas`` until the descent function is <= ``target``.

    Box/rate constraints are linear and the descent function is convex in the
    first input, so every convex combination stays box/rate feasible and the
    bisection terminates at a point meeting the target.
    """
    if ocp.descent(ocp.rollout(U)) <= target:
        return U
    lo, hi = 0.0, 1.0  # weight on U
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ocp.descent(ocp.rollout(mid * U + (1.0 - mid) * U_feas)) <= target:
            lo = mid
        else:
            hi = mid
    return lo * U + (1.0 - lo) * U_feas


def solve_ocp(ocp: LmpcProblem, warm_start, fallback=None) -> OcpSolution:
    """Gauss-Newton SQP with an l1 merit line search.

    ``fallback`` is the input used when the first-step descent constraint has
    no feasible point; it is held over the horizon in the returned sequence.
    """
    cfg = ocp.cfg
    U = ocp.project_sequence(np.asarray(warm_start, dtype=float).reshape(-1))
    free = ocp.free

    U_feas = None
    feas_target = 0.0
    if ocp.contraction:
        U_feas, g_min = _phase_one(ocp)
        tol = 1e-10 * max(1.0, ocp.V0)
        if g_min > tol:
            u_fb = ocp.project_sequence(np.tile(fallback if fallback is not None else U[: ocp.nu], cfg.N))
            xs = ocp.rollout(u_fb)
            return OcpSolution(
                u_sequence=u_fb.reshape(cfg.N, ocp.nu),
                xi_sequence=xs,
                first_step_descent=ocp.descent(xs) - ocp.required_decrease,
                status=FALLBACK,
                descent_margin=ocp.descent(xs),
                terminal_violation=ocp.terminal_violation(xs),
                cost=ocp.cost(u_fb, xs),
            )
        feas_target = max(g_min, 0.0)

    nu_d = 1.0
    nu_t = cfg.terminal_penalty

    def merit(lin):
        m = lin["cost"]
        if ocp.contraction:
            m += nu_d * max(0.0, lin["g"])
        if ocp.terminal:
            m += nu_t * max(0.0, lin["h"])
        return m

    lam_d = lam_t = 0.0
    lin = ocp.linearize(U)
    status = MAX_ITER
    kkt = np.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        if not np.all(np.isfinite(lin["r"])):
            raise SolverDivergenceError("non-finite residuals in SQP iterate")
        Jr = lin["Jr"][:, free]
        grad = 2.0 * Jr.T @ lin["r"]
        H = 2.0 * Jr.T @ Jr
        # constraint curvature weighted by the previous multipliers (Lagrangian GN Hessian)
        if ocp.contraction and lam_d > 0.0:
            Jv = lin["Jv1"][:, free]
            H += 2.0 * lam_d * Jv.T @ Jv
        if ocp.terminal and lam_t > 0.0:
            Jv = lin["JvN"][:, free]
            H += 2.0 * lam_t * Jv.T @ Jv
        nfree = grad.size
        H += 1e-9 * (1.0 + np.max(np.abs(np.diag(H)))) * np.eye(nfree)
        A_lin, b_lin = ocp.linear_constraints(U)
        A_lin = A_lin[:, free]
        rows, rhs = [A_lin], [b_lin]
        n_slack = int(ocp.terminal)
        Hq = np.zeros((nfree + n_slack, nfree + n_slack))
        Hq[:nfree, :nfree] = H
        gq = np.concatenate([grad, np.full(n_slack, nu_t)])
        rows = [np.hstack([A_lin, np.zeros((A_lin.shape[0], n_slack))])]
        if ocp.contraction:
            rows.append(np.concatenate([lin["dg"][free], np.zeros(n_slack)])[None, :])
            rhs.append(np.array([feas_target - lin["g"]]))
        if ocp.terminal:
            rows.append(np.concatenate([lin["dh"][free], [-1.0]])[None, :])
            rhs.append(np.array([-lin["h"]]))
            rows.append(np.concatenate([np.zeros(nfree), [-1.0]])[None, :])
            rhs.append(np.array([0.0]))
            Hq[nfree, nfree] = 1e-9
        A = np.vstack(rows)
        b = np.concatenate(rhs)
        qp = solve_qp(Hq, gq, A, b, tol=1e-10)
        p_free = qp.x[:nfree]
        if not np.all(np.isfinite(p_free)):
            raise SolverDivergenceError("non-finite QP step")
        if ocp.contraction:
            lam_d = float(qp.z[A_lin.shape[0]])
            nu_d = max(nu_d, 2.0 * lam_d + 1.0)
        if ocp.terminal:
            lam_t = float(qp.z[A_lin.shape[0] + int(ocp.contraction)])
        kkt = float(np.max(np.abs(H @ p_free))) / (1.0 + float(np.max(np.abs(grad))))
        step_small = float(np.max(np.abs(p_free))) <= cfg.kkt_tol * (1.0 + float(np.max(np.abs(U))))
        g_ok = (not ocp.contraction) or lin["g"] <= feas_target + 1e-9 * max(1.0, ocp.V0)
        if (kkt < cfg.kkt_tol or step_small) and g_ok:
            status = OPTIMAL
            break

        p = np.zeros_like(U)
        p[free] = p_free
        # model reduction for the Armijo test
        pred = -(grad @ p_free + 0.5 * p_free @ H @ p_free)
        if ocp.contraction:
            pred += nu_d * (max(0.0, lin["g"]) - max(0.0, lin["g"] + lin["dg"] @ p))
        if ocp.terminal:
            pred += nu_t * (max(0.0, lin["h"]) - max(0.0, lin["h"] + lin["dh"] @ p))
        phi0 = merit(lin)
        step = 1.0
        accepted = None
        for _ in range(30):
            cand = U + step * p
            lc = ocp.linearize(cand)
            if np.isfinite(lc["cost"]) and merit(lc) <= phi0 - 1e-4 * step * max(pred, 0.0):
                accepted = (cand, lc)
                break
            step *= cfg.line_search_beta
        if accepted is None:
            # no merit decrease along the step: at a stationary point to working precision
            status = OPTIMAL if g_ok else MAX_ITER
            break
        U, lin = accepted

    if not np.all(np.isfinite(U)):
        raise SolverDivergenceError("non-finite SQP iterate")
    if ocp.contraction:
        U = _safeguard(ocp, U, U_feas, feas_target + 1e-12 * max(1.0, ocp.V0))
    xs = ocp.rollout(U)
    g = ocp.descent(xs) if ocp.contraction else float("nan")
    dV = _lyap(xs[1], ocp._psi(1, xs[1]), ocp.gains, ocp.hydro) - ocp.V0
    return OcpSolution(
        u_sequence=U.reshape(cfg.N, ocp.nu),
        xi_sequence=xs,
        first_step_descent=dV,
        status=status,
        iterations=it,
        kkt_residual=kkt,
        descent_margin=g,
        terminal_violation=ocp.terminal_violation(xs),
        cost=ocp.cost(U, xs),
    )


# ---------------------------------------------------------------------------
# warm start / fallback / per-mode controller


def warm_start(mode: FaultParameters, tau_target, prev_solution, layout: ThrusterLayout, N: int,
               epsilon: float = 1e-6) -> np.ndarray:
    """Shifted previous sequence with a damped-LS allocation of ``tau_target`` appended.

    Without a previous solution the allocation fills the whole horizon.
    """
    u_end = allocate_damped(tau_target, mode, layout, epsilon)
    if prev_solution is None:
        return np.tile(u_end, (N, 1))
    prev = prev_solution.u_sequence if isinstance(prev_solution, OcpSolution) else np.asarray(prev_solution)
    prev = prev.reshape(-1, layout.n_thrusters)
    return np.vstack([prev[1:N], u_end[None, :]])


def fallback_move(xi0, state: VehicleState, ref: ReferenceSignal, mode: FaultParameters, gains: BackstepGains,
                  hydro: HydroModel, layout: ThrusterLayout, limits: InputLimits, u_prev, dt: float,
                  epsilon: float = 1e-6) -> np.ndarray:
    """Auxiliary law through the mode's allocation, clipped to the admissible set."""
    tau_b = auxiliary_law(state, ref, gains, hydro)
    log.debug("fallback move at xi0=%s", np.asarray(xi0.as_vector() if isinstance(xi0, AugmentedError) else xi0))
    return project_input(allocate_damped(tau_b, mode, layout, epsilon), u_prev, limits, dt)


class ModeController:
    """Receding-horizon LMPC for one mode hypothesis; keeps its own warm start."""

    def __init__(self, mode: FaultParameters, cfg: OcpConfig, gains: BackstepGains, hydro: HydroModel,
                 layout: ThrusterLayout, limits: InputLimits, contraction: bool = True, terminal: bool = True,
                 use_warm_start: bool = True):
        self.mode = mode
        self.cfg = cfg
        self.gains = gains
        self.hydro = hydro
        self.layout = layout
        self.limits = limits
        self.contraction = contraction
        self.terminal = terminal
        self.use_warm_start = use_warm_start
        self.previous: OcpSolution | None = None
        self.fallback_count = 0

    def reset(self):
        self.previous = None

    def step(self, state: VehicleState, refs, u_prev, d=None) -> OcpSolution:
        cfg = self.cfg
        xi0 = augmented_error(state, refs[0], d)
        ocp = build_ocp(xi0, refs, self.mode, u_prev, cfg, self.gains, self.hydro, self.layout, self.limits,
                        self.contraction, self.terminal)
        if self.use_warm_start:
            if self.previous is not None:
                xN = AugmentedError.from_vector(self.previous.xi_sequence[-1])
                tau_t = auxiliary_law(state_from_error(xN, refs[cfg.N - 1]), refs[cfg.N - 1], self.gains, self.hydro)
            else:
                tau_t = auxiliary_law(state, refs[0], self.gains, self.hydro)
            U0 = warm_start(self.mode, tau_t, self.previous, self.layout, cfg.N, cfg.epsilon)
        else:
            U0 = np.zeros((cfg.N, self.layout.n_thrusters))
        u_fb = fallback_move(xi0, state, refs[0], self.mode, self.gains, self.hydro, self.layout, self.limits,
                             u_prev, cfg.dt, cfg.epsilon) if self.contraction else None
        sol = solve_ocp(ocp, U0.ravel(), fallback=u_fb)
        if sol.status == FALLBACK:
            self.fallback_count += 1
            log.info("mode %s: descent infeasible, fallback applied", self.mode.gamma.tolist())
        self.previous = sol
        return sol


class BiasObserver:
    """Force-domain bias estimate for one mode hypothesis.

    After each period the body velocity predicted by the mode model (applied
    command plus current bias) is compared with the measured one; the
    residual, scaled back to a force, corrects the estimate with ``gain``.
    With ``gain = 1`` the estimate is the mismatch seen over the last period.
    """

    def __init__(self, mode: FaultParameters, hydro: HydroModel, layout: ThrusterLayout, dt: float,
                 gain: float = 0.5, bound: float | None = None):
        if not 0.0 <= gain <= 1.0:
            raise ValueError("observer gain must lie in [0, 1]")
        self.B = effective_matrix(layout, mode)
        self.hydro = hydro
        self.dt = dt
        self.gain = gain
        self.bound = bound
        self.d = np.zeros(3)

    def update(self, prev: VehicleState, u_applied, current: VehicleState) -> np.ndarray:
        if self.gain == 0.0:
            return self.d
        tau = self.B @ np.asarray(u_applied, dtype=float)
        pred = integrate_plant(prev, tau + self.d, np.zeros(3), self.dt, self.hydro)
        self.d = self.d + self.gain * (self.hydro.M @ (current.nu - pred.nu)) / self.dt
        if self.bound is not None:
            self.d = np.clip(self.d, -self.bound, self.bound)
        return self.d
