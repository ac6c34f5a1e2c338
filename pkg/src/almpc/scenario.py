"""Scenario definitions, closed-loop simulation and tracking metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from almpc.allocation import FaultParameters, InputLimits, ThrusterLayout, effective_matrix, project_input
from almpc.backstepping import (
    BackstepGains,
    ReferenceSignal,
    augmented_error,
    auxiliary_law,
    bsc_controller,
    error_variables,
    lyapunov_v2,
    lyapunov_value,
)
from almpc.dynamics import (
    Disturbance,
    HydroModel,
    VehicleState,
    default_hydro,
    integrate_plant,
    load_hydro,
    state_derivative,
    wrap_angle,
)
from almpc.estimation import FilterDivergenceError, ModeEstimator, ModeLibrary
from almpc.lmpc import FALLBACK, MAX_ITER, OPTIMAL, BiasObserver, ModeController, OcpConfig, SolverDivergenceError
from almpc.supervisor import (
    FaultTimer,
    FusionConfig,
    SupervisorState,
    blend_force,
    fuse_command,
    hysteresis_step,
    innovation_anomaly,
    jensen_margin,
    map_mode,
    update_timers,
)

log = logging.getLogger(__name__)

CONTROLLERS = ("almpc", "ampc", "bsc")
IDLE = "idle"
_STATUS_RANK = {OPTIMAL: 0, MAX_ITER: 1, FALLBACK: 2}


# ---------------------------------------------------------------------------
# references


def _case_derivatives(t, case: int):
    """Position and its first three time derivatives, (4, 2) per time (vectorized in t)."""
    t = np.asarray(t, dtype=float)
    if case == 1:
        x = [0.5 * t, 0.5 + 0 * t, 0 * t, 0 * t]
        y = [np.sin(0.5 * t), 0.5 * np.cos(0.5 * t), -0.25 * np.sin(0.5 * t), -0.125 * np.cos(0.5 * t)]
    elif case == 2:
        x = [-np.sin(0.5 * t), -0.5 * np.cos(0.5 * t), 0.25 * np.sin(0.5 * t), 0.125 * np.cos(0.5 * t)]
        y = [np.sin(0.25 * t), 0.25 * np.cos(0.25 * t), -0.0625 * np.sin(0.25 * t), -0.015625 * np.cos(0.25 * t)]
    else:
        raise ValueError(f"unknown case {case!r}")
    return np.array(x), np.array(y)


def _heading_rates(xs, ys):
    _, xd, xdd, xddd = xs
    _, yd, ydd, yddd = ys
    n = xd * ydd - yd * xdd
    q = xd * xd + yd * yd
    n_dot = xd * yddd - yd * xddd
    q_dot = 2.0 * (xd * xdd + yd * ydd)
    return n / q, (n_dot * q - n * q_dot) / (q * q)


@lru_cache(maxsize=4096)
def _unwrapped_heading(t: float, case: int) -> float:
    """Tangent heading made continuous from t=0 by integrating its rate on a fine grid."""
    xs, ys = _case_derivatives(0.0, case)
    psi0 = math.atan2(ys[1], xs[1])
    if t <= 0.0:
        return psi0
    xs, ys = _case_derivatives(t, case)
    raw = math.atan2(ys[1], xs[1])
    n = max(2, int(math.ceil(t / 0.01)) + 1)
    grid = np.linspace(0.0, t, n)
    rate, _ = _heading_rates(*_case_derivatives(grid, case))
    approx = psi0 + float(np.sum(0.5 * (rate[1:] + rate[:-1]) * np.diff(grid)))
    return raw + 2.0 * math.pi * round((approx - raw) / (2.0 * math.pi))


def reference(t: float, case: int) -> ReferenceSignal:
    """Desired pose, velocity and acceleration; heading follows the path tangent."""
    if t < 0.0:
        raise ValueError("reference time must be non-negative")
    xs, ys = _case_derivatives(t, case)
    psi_dot, psi_ddot = _heading_rates(xs, ys)
    psi = _unwrapped_heading(float(t), int(case))
    return ReferenceSignal(
        [xs[0], ys[0], psi],
        [xs[1], ys[1], float(psi_dot)],
        [xs[2], ys[2], float(psi_ddot)],
    )


# ---------------------------------------------------------------------------
# configuration


def default_schedule(case: int, library: ModeLibrary) -> list[tuple[float, str]]:
    if case == 1:
        return [(15.0, "II")]
    if case == 2:
        return [(10.0, "II"), (20.0, "III")]
    raise ValueError(f"unknown case {case!r}")


def inject_fault(schedule, t: float, initial: FaultParameters | None = None) -> FaultParameters:
    """True parameters at time ``t``: the last schedule entry with ``t_i <= t``."""
    if t < 0.0:
        raise ValueError("time must be non-negative")
    current = FaultParameters.nominal(4) if initial is None else initial
    for t_i, fault in schedule:
        if t_i <= t + 1e-9:
            current = fault
    return current


@dataclass
class ScenarioConfig:
    case: int = 1
    controller: str = "almpc"
    T: float | None = None
    dt: float = 0.1
    substeps: int = 10
    schedule: list | None = None  # [(t, mode id)] ; None -> case default
    x0: list = field(default_factory=lambda: [0.5, 0.0, 0.0, 0.0, 0.0, 0.0])
    seed: int = 0
    measurement_noise: bool = True
    disturbance_bound: float = 0.0
    feedback: str = "truth"  # or "estimate": MAP filter mean
    rho: float = 0.9995
    t_diag: float = 0.98
    skip_probability: float = 0.0
    bias_gain: float = 0.5  # 0 disables the force-bias observer
    ampc_bias: bool = False  # give the AMPC baseline the bias observer too
    ocp: OcpConfig = field(default_factory=OcpConfig)
    gains: BackstepGains = field(default_factory=BackstepGains)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    limits: InputLimits = field(default_factory=InputLimits)
    layout: ThrusterLayout = field(default_factory=ThrusterLayout.vectored_x)
    library: ModeLibrary = field(default_factory=ModeLibrary)
    hydro: HydroModel = field(default_factory=default_hydro)

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if self.case not in (1, 2):
            raise ValueError("case must be 1 or 2")
        if self.T is None:
            self.T = 30.0 if self.case == 1 else 40.0
        if self.schedule is None:
            self.schedule = default_schedule(self.case, self.library)
        if self.T < 0.0 or self.dt <= 0.0:
            raise ValueError("need T >= 0 and dt > 0")
        if abs(self.dt - self.ocp.dt) > 1e-12:
            raise ValueError("scenario dt must match the controller sampling time")
        if self.feedback not in ("truth", "estimate"):
            raise ValueError("feedback must be 'truth' or 'estimate'")
        times = [float(t) for t, _ in self.schedule]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("fault times must be strictly increasing")
        if any(t < 0.0 or t > self.T for t in times):
            raise ValueError("fault times must lie within the run horizon")
        for _, m in self.schedule:
            self.library.index(m)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def fault_schedule(self) -> list[tuple[float, FaultParameters]]:
        return [(float(t), self.library.params[self.library.index(m)]) for t, m in self.schedule]

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        """Build from a plain mapping (e.g. a JSON override file); all keys optional."""
        data = dict(data)
        kw = {}
        for key in ("case", "controller", "T", "dt", "substeps", "seed", "measurement_noise", "disturbance_bound",
                    "feedback", "rho", "t_diag", "skip_probability", "bias_gain", "ampc_bias", "x0"):
            if key in data:
                kw[key] = data.pop(key)
        if "schedule" in data:
            kw["schedule"] = [(float(t), str(m)) for t, m in data.pop("schedule")]
        if "ocp" in data:
            o = dict(data.pop("ocp"))
            for k in ("Q_eta", "Q_s", "Q_d", "R_du", "R_u"):
                if k in o:
                    o[k] = np.asarray(o[k], dtype=float)
                    if o[k].ndim == 1:
                        o[k] = np.diag(o[k])
            kw["ocp"] = OcpConfig(**o)
        elif "dt" in kw:
            kw["ocp"] = OcpConfig(dt=kw["dt"])
        if "gains" in data:
            kw["gains"] = BackstepGains(**{k: np.diag(v) if np.ndim(v) == 1 else v for k, v in data.pop("gains").items()})
        if "fusion" in data:
            kw["fusion"] = FusionConfig(**data.pop("fusion"))
        if "limits" in data:
            lim = data.pop("limits")
            kw["limits"] = InputLimits(
                np.full(4, lim.get("u_min", -500.0)), np.full(4, lim.get("u_max", 500.0)), lim.get("rate_max", 2000.0)
            )
        if "hydro_file" in data:
            kw["hydro"] = load_hydro(data.pop("hydro_file"))
        if data:
            raise ValueError(f"unknown config keys: {sorted(data)}")
        return cls(**kw)


def auxiliary_decay(case: int = 1, T: float = 30.0, dt: float = 0.1, substeps: int = 20, x0=None,
                    gains: BackstepGains | None = None, hydro: HydroModel | None = None):
    """Nominal plant under the continuous auxiliary law, ``V2`` sampled every ``dt``.

    The force is re-evaluated at every RK4 stage (no allocation, no limits), so
    this is the unconstrained closed loop the first-step contraction mimics.
    Returns ``(t, V2)`` arrays.
    """
    gains = BackstepGains() if gains is None else gains
    hydro = default_hydro() if hydro is None else hydro
    x = np.array([0.5, 0.0, 0.0, 0.0, 0.0, 0.0] if x0 is None else x0, dtype=float)
    zero = np.zeros(3)

    def f(t, x):
        st = VehicleState.from_vector(x)
        return state_derivative(x, auxiliary_law(st, reference(t, case), gains, hydro), zero, hydro)

    def v2(t, x):
        st = VehicleState.from_vector(x)
        ev = error_variables(st, reference(t, case))
        return lyapunov_v2(ev.eta_tilde, ev.s, gains, hydro, st.psi)

    n = int(round(T / dt))
    h = dt / substeps
    ts = np.arange(n + 1) * dt
    out = np.empty(n + 1)
    out[0] = v2(0.0, x)
    for k in range(n):
        for j in range(substeps):
            t = ts[k] + j * h
            k1 = f(t, x)
            k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
            k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
            k4 = f(t + h, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = v2(ts[k + 1], x)
    return ts, out


# ---------------------------------------------------------------------------
# run log

CORE_COLUMNS = [
    "t", "x", "y", "psi", "u", "v", "r",
    "x_d", "y_d", "psi_d", "e_x", "e_y", "e_psi",
    "u1", "u2", "u3", "u4", "tau_x", "tau_y", "tau_n",
    "p_I", "p_II", "p_III", "true_mode", "map_mode", "locked_mode",
    "status", "V", "descent_margin", "iterations", "kkt_residual", "jensen_margin", "jensen_checked",
]
STRING_COLUMNS = {"status"}
INT_COLUMNS = {"true_mode", "map_mode", "locked_mode", "iterations", "jensen_checked"}


def telemetry_columns(mode_ids) -> list[str]:
    cols = ["t"]
    for m in mode_ids:
        cols += [f"status_{m}", f"margin_{m}", f"iters_{m}", f"kkt_{m}"] + [f"u0_{m}_{j}" for j in range(1, 5)]
        cols += [f"d_{m}_{j}" for j in range(1, 4)]
    return cols


@dataclass
class RunLog:
    columns: dict
    telemetry: dict
    summary: dict

    @property
    def n_rows(self) -> int:
        return len(self.columns["t"])

    def errors(self) -> np.ndarray:
        return np.column_stack([self.columns["e_x"], self.columns["e_y"], self.columns["e_psi"]])


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_table(cols: dict, order: list[str], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(order)
        for i in range(len(cols[order[0]])):
            w.writerow([_fmt(cols[c][i]) for c in order])


def _read_table(path: Path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    out = {}
    for j, name in enumerate(header):
        raw = [r[j] for r in body]
        if name in STRING_COLUMNS or name.startswith("status_"):
            out[name] = np.array(raw, dtype=object)
        elif name in INT_COLUMNS or name.startswith("iters_"):
            out[name] = np.array([int(v) for v in raw], dtype=int)
        else:
            out[name] = np.array([float(v) for v in raw], dtype=float)
    return out


def write_log(run: RunLog, path, telemetry: bool = False) -> None:
    """Write ``run.csv`` and ``summary.json`` (and ``telemetry.csv``) into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(run.columns, CORE_COLUMNS, out / "run.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(run.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if telemetry:
        order = [c for c in run.telemetry]
        _write_table(run.telemetry, order, out / "telemetry.csv")


def read_log(path) -> RunLog:
    out = Path(path)
    cols = _read_table(out / "run.csv")
    tel = _read_table(out / "telemetry.csv") if (out / "telemetry.csv").exists() else {}
    summary = json.loads((out / "summary.json").read_text()) if (out / "summary.json").exists() else {}
    return RunLog(cols, tel, summary)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    RMSE: dict
    MaxAE: dict
    SSE: dict
    IAE: dict
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(errors, dt: float) -> MetricsReport:
    """Per-axis error statistics; ``errors`` is (n, 3) with columns x, y, psi.

    The heading column is wrapped before use. IAE is the trapezoidal integral.
    """
    E = np.array(errors, dtype=float).reshape(-1, 3)
    if E.shape[0] == 0:
        raise ValueError("metrics need at least one sample")
    E[:, 2] = wrap_angle(E[:, 2])
    n = E.shape[0]
    axes = ("x", "y", "psi")
    sse = np.sum(E * E, axis=0)
    A = np.abs(E)
    iae = np.sum(0.5 * (A[1:] + A[:-1]), axis=0) * dt if n > 1 else np.zeros(3)
    return MetricsReport(
        RMSE={a: float(np.sqrt(sse[i] / n)) for i, a in enumerate(axes)},
        MaxAE={a: float(np.max(A[:, i])) for i, a in enumerate(axes)},
        SSE={a: float(sse[i]) for i, a in enumerate(axes)},
        IAE={a: float(iae[i]) for i, a in enumerate(axes)},
        n=n,
    )


# ---------------------------------------------------------------------------
# closed loop


def ampc_controller(ctrl: ModeController, state: VehicleState, refs, u_prev):
    """Adaptive MPC baseline step: same OCP without descent/terminal constraints."""
    return ctrl.step(state, refs, u_prev)


def _worst(statuses) -> str:
    run = [s for s in statuses if s != IDLE]
    return max(run, key=_STATUS_RANK.__getitem__) if run else IDLE


class ScenarioAborted(RuntimeError):
    """A solver or filter diverged; ``log`` holds every row completed before the failure."""

    def __init__(self, message: str, log: RunLog):
        super().__init__(message)
        self.log = log


def run(cfg: ScenarioConfig) -> RunLog:
    """Simulate one scenario and return the per-step log with its summary.

    Raises ScenarioAborted (carrying the partial log) on solver or filter divergence.
    """
    lib, ocp_cfg, hydro, layout, limits, gains = cfg.library, cfg.ocp, cfg.hydro, cfg.layout, cfg.limits, cfg.gains
    schedule = cfg.fault_schedule()
    n_modes = len(lib)
    mode_ids = lib.ids
    dt = cfg.dt
    K = cfg.n_steps

    rng = np.random.default_rng(cfg.seed)
    disturbance = Disturbance(cfg.disturbance_bound, seed=cfg.seed + 1)
    R_noise = np.diag([0.1, 0.1, 0.1, 0.03, 0.03, 0.03])
    L_noise = np.linalg.cholesky(R_noise)

    state = VehicleState.from_vector(cfg.x0)
    use_estimator = cfg.controller != "bsc"
    estimator = ModeEstimator(lib, state.as_vector(), hydro, layout, dt, R=R_noise, rho=cfg.rho) if use_estimator else None
    if estimator is not None and cfg.t_diag != lib.t_diag:
        lib = ModeLibrary(lib.modes, cfg.t_diag)
        estimator.library = lib
    contraction = cfg.controller == "almpc"
    controllers = [
        ModeController(f, ocp_cfg, gains, hydro, layout, limits, contraction=contraction, terminal=contraction)
        for f in lib.params
    ]
    B_modes = [effective_matrix(layout, f) for f in lib.params]
    use_bias = cfg.controller == "almpc" or (cfg.controller == "ampc" and cfg.ampc_bias)
    observers = [BiasObserver(f, hydro, layout, dt, cfg.bias_gain) for f in lib.params]
    fb_prev = None
    last_run = [-2] * n_modes
    sup = SupervisorState()
    ampc_mode = 0
    timers = [FaultTimer(t_f, lib.index_of(f)) for t_f, f in schedule]

    cols = {c: [] for c in CORE_COLUMNS}
    tel = {c: [] for c in telemetry_columns(mode_ids)}
    u_prev = np.zeros(4)
    p = np.zeros(n_modes) if not use_estimator else estimator.belief.p
    fallback_solves = 0
    fallback_steps = 0
    solves = 0
    lock_events = []
    unlock_events = []

    aborted = None
    try:
        for k in range(K + 1):
            t = k * dt
            true_fault = inject_fault(schedule, t)
            true_idx = lib.index_of(true_fault)
            x_true = state.as_vector()
            y_meas = x_true + (L_noise @ rng.standard_normal(6) if cfg.measurement_noise else 0.0)

            anomaly = False
            if use_estimator:
                if k > 0:
                    est = estimator.step(u_prev, y_meas)
                    p = est.belief.p
                    if sup.locked_mode is not None:
                        m = sup.locked_mode
                        anomaly = innovation_anomaly(est.innovations[m], est.innovation_covs[m], cfg.fusion)
                was_locked = sup.locked_mode
                sup = hysteresis_step(sup, p, cfg.fusion, anomaly)
                if sup.locked_mode is not None and was_locked is None:
                    lock_events.append({"t": t, "mode": mode_ids[sup.locked_mode]})
                elif sup.locked_mode is None and was_locked is not None:
                    unlock_events.append({"t": t, "mode": mode_ids[was_locked], "anomaly": bool(anomaly)})

            if cfg.feedback == "estimate" and use_estimator:
                fb_state = VehicleState.from_vector(estimator.filters[map_mode(p, sup.locked_mode)].mean)
            else:
                fb_state = state
            refs = [reference(t + i * dt, cfg.case) for i in range(ocp_cfg.N + 1)]
            ref = refs[0]
            if fb_prev is not None and use_bias:
                for obs in observers:
                    obs.update(fb_prev, u_prev, fb_state)
            fb_prev = fb_state

            bias = [obs.d.copy() for obs in observers]
            statuses = [IDLE] * n_modes
            sols = [None] * n_modes
            jensen, jensen_checked = 0.0, 0
            map_idx = map_mode(p, sup.locked_mode) if use_estimator else 0

            if cfg.controller == "bsc":
                u = bsc_controller(fb_state, ref, gains, hydro, layout, limits, u_prev, dt, epsilon=ocp_cfg.epsilon)
                tau = effective_matrix(layout, FaultParameters.nominal(4)) @ u
            else:
                if cfg.controller == "ampc":
                    if sup.locked_mode is not None:
                        ampc_mode = sup.locked_mode
                    active = [ampc_mode]
                elif sup.locked_mode is not None:
                    active = [sup.locked_mode]
                elif not cfg.fusion.blend_enabled:
                    active = [map_idx]
                else:
                    active = [i for i in range(n_modes) if p[i] > cfg.skip_probability]
                for i in active:
                    if last_run[i] != k - 1:
                        controllers[i].reset()
                    sols[i] = controllers[i].step(fb_state, refs, u_prev, bias[i])
                    last_run[i] = k
                    statuses[i] = sols[i].status
                    solves += 1
                    fallback_solves += statuses[i] == FALLBACK
                if any(s == FALLBACK for s in statuses):
                    fallback_steps += 1

                if len(active) == 1:
                    i = active[0]
                    u = project_input(sols[i].u0, u_prev, limits, dt)
                    tau = B_modes[i] @ u
                    map_idx = i if cfg.controller == "ampc" else map_idx
                else:
                    taus = np.zeros((n_modes, 3))
                    w = np.zeros(n_modes)
                    for i in active:
                        taus[i] = B_modes[i] @ sols[i].u0
                        w[i] = p[i]
                    w /= w.sum()
                    tau = blend_force(taus, w)
                    u_hat, u, map_idx = fuse_command(tau, p, lib, layout, limits, u_prev, dt, sup.locked_mode,
                                                     ocp_cfg.epsilon)
                    if all(statuses[i] == OPTIMAL for i in active) and np.max(np.abs(u - u_hat)) <= 1e-9:
                        # blended bias: the force-space average the per-mode predictions were built on
                        d_blend = sum(w[i] * bias[i] for i in active)
                        xi_map = augmented_error(fb_state, ref, d_blend)
                        jensen = jensen_margin(xi_map, u_hat, lib.params[map_idx], ref, dt, gains, hydro, layout,
                                               ocp_cfg.alpha, refs[1])
                        jensen_checked = 1

            state_error = augmented_error(state, ref).eta_tilde
            if use_estimator:
                update_timers(timers, t, p, state_error[:2], cfg.fusion)

            run_sols = [s for s in sols if s is not None]
            cols["t"].append(t)
            for name, val in zip(("x", "y", "psi", "u", "v", "r"), x_true):
                cols[name].append(float(val))
            for name, val in zip(("x_d", "y_d", "psi_d"), ref.eta_d):
                cols[name].append(float(val))
            for name, val in zip(("e_x", "e_y", "e_psi"), state_error):
                cols[name].append(float(val))
            for j in range(4):
                cols[f"u{j + 1}"].append(float(u[j]))
            for name, val in zip(("tau_x", "tau_y", "tau_n"), tau):
                cols[name].append(float(val))
            for j, m in enumerate(mode_ids):
                cols[f"p_{m}"].append(float(p[j]) if use_estimator else 0.0)
            cols["true_mode"].append(-1 if true_idx is None else true_idx)
            cols["map_mode"].append(map_idx if use_estimator else -1)
            cols["locked_mode"].append(-1 if sup.locked_mode is None else sup.locked_mode)
            cols["status"].append("bsc" if cfg.controller == "bsc" else _worst(statuses))
            cols["V"].append(lyapunov_value(augmented_error(state, ref), gains, hydro, state.psi))
            margins = [s.descent_margin for s in run_sols if np.isfinite(s.descent_margin)]
            cols["descent_margin"].append(max(margins) if margins else 0.0)
            cols["iterations"].append(max((s.iterations for s in run_sols), default=0))
            kkts = [s.kkt_residual for s in run_sols if np.isfinite(s.kkt_residual)]
            cols["kkt_residual"].append(max(kkts) if kkts else 0.0)
            cols["jensen_margin"].append(jensen)
            cols["jensen_checked"].append(jensen_checked)

            tel["t"].append(t)
            for i, m in enumerate(mode_ids):
                s = sols[i]
                tel[f"status_{m}"].append(statuses[i])
                tel[f"margin_{m}"].append(s.descent_margin if s is not None and np.isfinite(s.descent_margin) else 0.0)
                tel[f"iters_{m}"].append(s.iterations if s is not None else 0)
                tel[f"kkt_{m}"].append(s.kkt_residual if s is not None and np.isfinite(s.kkt_residual) else 0.0)
                for j in range(4):
                    tel[f"u0_{m}_{j + 1}"].append(float(s.u0[j]) if s is not None else 0.0)
                for j in range(3):
                    tel[f"d_{m}_{j + 1}"].append(float(bias[i][j]))

            if k == K:
                break
            tau_true = effective_matrix(layout, true_fault) @ u
            state = integrate_plant(state, tau_true, disturbance.sample(), dt, hydro, cfg.substeps)
            u_prev = u
    except (SolverDivergenceError, FilterDivergenceError) as exc:
        log.error("run aborted at t=%.3f: %s", t, exc)
        aborted = f"{type(exc).__name__} at t={t:.3f}: {exc}"

    columns = {}
    for c, v in cols.items():
        if c in STRING_COLUMNS:
            columns[c] = np.array(v, dtype=object)
        elif c in INT_COLUMNS:
            columns[c] = np.array(v, dtype=int)
        else:
            columns[c] = np.array(v, dtype=float)
    telemetry = {}
    for c, v in tel.items():
        if c.startswith("status_"):
            telemetry[c] = np.array(v, dtype=object)
        elif c.startswith("iters_"):
            telemetry[c] = np.array(v, dtype=int)
        else:
            telemetry[c] = np.array(v, dtype=float)

    steps = len(cols["t"])
    metrics = compute_metrics(np.column_stack([columns["e_x"], columns["e_y"], columns["e_psi"]]), dt) if steps else None
    summary = {
        "case": cfg.case,
        "controller": cfg.controller,
        "seed": cfg.seed,
        "T": cfg.T,
        "dt": dt,
        "steps": steps,
        "metrics": metrics.as_dict() if metrics is not None else None,
        "faults": [tm.as_dict() if use_estimator else {"t_fault": tm.t_fault, "true_mode": tm.true_mode,
                                                        "T_det": "n/a", "T_acc": "n/a"} for tm in timers],
        "fallback_steps": fallback_steps,
        "fallback_fraction": fallback_steps / steps if steps else 0.0,
        "fallback_solves": fallback_solves,
        "ocp_solves": solves,
        "lock_events": lock_events,
        "unlock_events": unlock_events,
        "aborted": aborted,
    }
    result = RunLog(columns, telemetry, summary)
    if aborted is not None:
        raise ScenarioAborted(aborted, result)
    return result
