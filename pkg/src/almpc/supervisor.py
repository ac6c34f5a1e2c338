"""Fusion of the per-mode commands and the lock/unlock state machine.

Also tracks detection and accommodation times for each injected fault.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from almpc.allocation import InputLimits, ThrusterLayout, allocate_damped, project_input
from almpc.backstepping import AugmentedError, BackstepGains, ReferenceSignal, lyapunov_value
from almpc.dynamics import HydroModel
from almpc.estimation import ModeLibrary
from almpc.lmpc import predict_step


@dataclass(frozen=True)
class FusionConfig:
    p_on: float = 0.95
    p_off: float = 0.80
    N_on: int = 10
    N_off: int = 5
    blend_enabled: bool = True
    # anomaly unlock: normalized innovation above the chi-square quantile this many samples in a row
    anomaly_quantile: float = 0.999
    anomaly_count: int = 5
    measurement_dim: int = 6

    def __post_init__(self):
        if not 0.0 < self.p_off < self.p_on < 1.0:
            raise ValueError("need 0 < p_off < p_on < 1")
        if self.N_on < 1 or self.N_off < 1 or self.anomaly_count < 1:
            raise ValueError("dwell counts must be >= 1")

    @property
    def anomaly_gate(self) -> float:
        return float(chi2.ppf(self.anomaly_quantile, self.measurement_dim))


@dataclass(frozen=True)
class SupervisorState:
    locked_mode: int | None = None
    on_counter: int = 0
    on_mode: int | None = None
    off_counter: int = 0
    anomaly_counter: int = 0


def map_mode(p, locked: int | None = None) -> int:
    """Most probable mode; exact ties go to the locked mode, else the lowest index."""
    p = np.asarray(p, dtype=float)
    best = np.flatnonzero(p == np.max(p))
    if locked is not None and locked in best:
        return int(locked)
    return int(best[0])


def blend_force(tau_candidates, p) -> np.ndarray:
    """Posterior-weighted force: ``sum_i p_i tau_i``."""
    return np.asarray(p, dtype=float) @ np.asarray(tau_candidates, dtype=float)


def fuse_command(tau_blend, p, library: ModeLibrary, layout: ThrusterLayout, limits: InputLimits, u_prev,
                 dt: float, locked: int | None = None, epsilon: float = 1e-6):
    """Allocate the blended force with the MAP mode's parameters and project.

    Returns ``(u_hat, u_applied, map_index)``; ``u_hat`` is the unprojected allocation.
    """
    k = map_mode(p, locked)
    u_hat = allocate_damped(tau_blend, library.params[k], layout, epsilon)
    return u_hat, project_input(u_hat, u_prev, limits, dt), k


def hysteresis_step(sup: SupervisorState, p, cfg: FusionConfig, anomaly: bool = False) -> SupervisorState:
    """Advance the lock state machine by one sample.

    Unlocked: count consecutive samples in which one mode holds ``p >= p_on``
    and lock on it after ``N_on``. Locked: count consecutive samples with the
    locked posterior ``<= p_off`` (or flagged ``anomaly``) and release after
    ``N_off`` (``anomaly_count``).
    """
    p = np.asarray(p, dtype=float)
    if sup.locked_mode is None:
        m = map_mode(p)
        if p[m] >= cfg.p_on:
            count = sup.on_counter + 1 if sup.on_mode == m else 1
            if count >= cfg.N_on:
                return SupervisorState(locked_mode=m)
            return replace(sup, on_counter=count, on_mode=m)
        return replace(sup, on_counter=0, on_mode=None)

    off = sup.off_counter + 1 if p[sup.locked_mode] <= cfg.p_off else 0
    anom = sup.anomaly_counter + 1 if anomaly else 0
    if off >= cfg.N_off or anom >= cfg.anomaly_count:
        return SupervisorState()
    return replace(sup, off_counter=off, anomaly_counter=anom)


def innovation_anomaly(e, S, cfg: FusionConfig) -> bool:
    """Normalized innovation squared above the chi-square gate."""
    e = np.asarray(e, dtype=float)
    return float(e @ np.linalg.solve(S, e)) > cfg.anomaly_gate


def jensen_margin(xi0: AugmentedError, u_hat, mode, ref: ReferenceSignal, dt: float, gains: BackstepGains,
                  hydro: HydroModel, layout: ThrusterLayout, alpha: float,
                 ref_next: ReferenceSignal | None = None) -> float:
    """``V(xi+) - V(xi) + alpha |eta_tilde|^2`` for the fused command under the MAP mode.

    Non-positive means the blended move inherits the per-mode contraction. The
    heading in ``V(xi+)`` is taken against ``ref_next`` (defaults to ``ref``),
    as in the per-mode descent constraint.
    """
    xi1 = predict_step(xi0, u_hat, mode, ref, dt, hydro, layout, gains)
    psi0 = ref.eta_d[2] + xi0.eta_tilde[2]
    psi1 = (ref if ref_next is None else ref_next).eta_d[2] + xi1.eta_tilde[2]
    dV = lyapunov_value(xi1, gains, hydro, psi1) - lyapunov_value(xi0, gains, hydro, psi0)
    return dV + alpha * float(xi0.eta_tilde @ xi0.eta_tilde)


# ---------------------------------------------------------------------------
# detection / accommodation timing


@dataclass
class FaultTimer:
    """Timing of one fault event, as offsets from its injection time.

    ``T_det``: when the true-mode posterior has stayed ``>= p_on`` for
    ``N_on`` consecutive samples (the sample completing the run).
    ``T_acc``: when ``|e_x|, |e_y| < acc_band`` has held for ``acc_window``
    seconds. The ``*_onset`` fields give the first sample of that run/window.
    """

    t_fault: float
    true_mode: int | None
    acc_band: float = 0.1
    acc_window: float = 1.0
    T_det: float | None = None
    T_det_onset: float | None = None
    T_acc: float | None = None
    T_acc_onset: float | None = None
    _det_start: float | None = field(default=None, repr=False)
    _det_count: int = field(default=0, repr=False)
    _acc_start: float | None = field(default=None, repr=False)

    def update(self, t: float, p, err_xy, cfg: FusionConfig):
        if t < self.t_fault - 1e-12:
            return
        if self.T_det is None and self.true_mode is not None:
            if p[self.true_mode] >= cfg.p_on:
                if self._det_count == 0:
                    self._det_start = t
                self._det_count += 1
                if self._det_count >= cfg.N_on:
                    self.T_det = round(t - self.t_fault, 9)
                    self.T_det_onset = round(self._det_start - self.t_fault, 9)
            else:
                self._det_count = 0
        if self.T_acc is None:
            if abs(err_xy[0]) < self.acc_band and abs(err_xy[1]) < self.acc_band:
                if self._acc_start is None:
                    self._acc_start = t
                if t - self._acc_start >= self.acc_window - 1e-9:
                    self.T_acc = round(t - self.t_fault, 9)
                    self.T_acc_onset = round(self._acc_start - self.t_fault, 9)
            else:
                self._acc_start = None

    def as_dict(self) -> dict:
        return {
            "t_fault": self.t_fault,
            "true_mode": self.true_mode,
            "T_det": self.T_det,
            "T_det_onset": self.T_det_onset,
            "T_acc": self.T_acc,
            "T_acc_onset": self.T_acc_onset,
        }


def update_timers(timers: list[FaultTimer], t: float, p, err_xy, cfg: FusionConfig) -> None:
    """Feed one sample to the timer of the most recent fault injected at or before ``t``."""
    active = [tm for tm in timers if tm.t_fault <= t + 1e-12]
    if active:
        active[-1].update(t, p, err_xy, cfg)
