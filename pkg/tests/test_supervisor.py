import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2

from almpc.allocation import InputLimits, ThrusterLayout, effective_matrix
from almpc.estimation import ModeLibrary
from almpc.supervisor import (
    FaultTimer,
    FusionConfig,
    SupervisorState,
    blend_force,
    fuse_command,
    hysteresis_step,
    innovation_anomaly,
    map_mode,
    update_timers,
)

CFG = FusionConfig()
LIB = ModeLibrary()
LAYOUT = ThrusterLayout.vectored_x()
LIMITS = InputLimits()

HIGH_II = np.array([0.015, 0.97, 0.015])
MID_II = np.array([0.15, 0.7, 0.15])


def reference_machine(levels, n_on, n_off):
    """Plain re-statement of the dwell rule on a 0/1 stream for mode II.

    1 = p_II high (>= p_on), 0 = p_II low (<= p_off, and no mode above p_on).
    Returns the lock flag after each sample.
    """
    locked, on, off, out = False, 0, 0, []
    for lvl in levels:
        if not locked:
            on = on + 1 if lvl else 0
            if on == n_on:
                locked, on, off = True, 0, 0
        else:
            off = off + 1 if not lvl else 0
            if off == n_off:
                locked, on, off = False, 0, 0
        out.append(locked)
    return out


def drive(levels, cfg):
    sup, out = SupervisorState(), []
    for lvl in levels:
        sup = hysteresis_step(sup, HIGH_II if lvl else MID_II, cfg)
        assert sup.on_counter >= 0 and sup.off_counter >= 0
        out.append(sup.locked_mode == 1)
    return out


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(p_on=0.8, p_off=0.9)
    with pytest.raises(ValueError):
        FusionConfig(N_on=0)
    with pytest.raises(ValueError):
        FusionConfig(p_on=1.0)


def test_lock_after_exactly_ten():
    sup = SupervisorState()
    for k in range(1, 11):
        sup = hysteresis_step(sup, HIGH_II, CFG)
        assert (sup.locked_mode == 1) == (k == 10)


def test_nine_then_low_resets():
    sup = SupervisorState()
    for _ in range(9):
        sup = hysteresis_step(sup, HIGH_II, CFG)
    assert sup.on_counter == 9
    sup = hysteresis_step(sup, [0.25, 0.5, 0.25], CFG)
    assert sup.locked_mode is None and sup.on_counter == 0
    for k in range(1, 11):
        sup = hysteresis_step(sup, HIGH_II, CFG)
        assert (sup.locked_mode == 1) == (k == 10)


def test_unlock_after_exactly_five():
    sup = SupervisorState(locked_mode=1)
    for k in range(1, 6):
        sup = hysteresis_step(sup, MID_II, CFG)
        assert (sup.locked_mode is None) == (k == 5)


def test_switching_high_mode_restarts_count():
    sup = SupervisorState()
    for _ in range(6):
        sup = hysteresis_step(sup, HIGH_II, CFG)
    sup = hysteresis_step(sup, [0.01, 0.01, 0.98], CFG)
    assert sup.on_counter == 1 and sup.on_mode == 2


def test_locked_posterior_between_thresholds_holds():
    sup = SupervisorState(locked_mode=1)
    for _ in range(4):
        sup = hysteresis_step(sup, MID_II, CFG)
    sup = hysteresis_step(sup, [0.05, 0.9, 0.05], CFG)
    assert sup.off_counter == 0 and sup.locked_mode == 1
    for _ in range(100):
        sup = hysteresis_step(sup, [0.05, 0.9, 0.05], CFG)
    assert sup.locked_mode == 1


@pytest.mark.parametrize("n", range(1, 17))
def test_exhaustive_sequences_default_dwell(n):
    for levels in itertools.product((0, 1), repeat=n):
        assert drive(levels, CFG) == reference_machine(levels, 10, 5)


def test_exhaustive_sequences_short_dwell():
    cfg = FusionConfig(N_on=3, N_off=2)
    for n in range(1, 15):
        for levels in itertools.product((0, 1), repeat=n):
            assert drive(levels, cfg) == reference_machine(levels, 3, 2)


def test_anomaly_unlock():
    sup = SupervisorState(locked_mode=1)
    for k in range(1, 6):
        sup = hysteresis_step(sup, HIGH_II, CFG, anomaly=True)
        assert (sup.locked_mode is None) == (k == 5)
    sup = SupervisorState(locked_mode=1)
    for k in range(20):
        sup = hysteresis_step(sup, HIGH_II, CFG, anomaly=k % 5 != 4)
    assert sup.locked_mode == 1


def test_anomaly_gate():
    assert CFG.anomaly_gate == pytest.approx(chi2.ppf(0.999, 6), rel=1e-12)
    assert CFG.anomaly_gate == pytest.approx(22.4577, abs=1e-3)
    S = np.eye(6)
    assert not innovation_anomaly(np.full(6, np.sqrt(22.0 / 6)), S, CFG)
    assert innovation_anomaly(np.full(6, np.sqrt(23.0 / 6)), S, CFG)
    assert not innovation_anomaly(np.full(6, np.sqrt(23.0 / 6)), 2 * S, CFG)


def test_map_mode_tie_break():
    assert map_mode([0.5, 0.5, 0.0]) == 0
    assert map_mode([0.5, 0.5, 0.0], locked=1) == 1
    assert map_mode([0.5, 0.5, 0.0], locked=2) == 0
    assert map_mode([0.2, 0.3, 0.5], locked=0) == 2


def test_blend_examples():
    taus = np.array([[10.0, 0, 0], [0, 10.0, 0], [1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(blend_force(taus, [1, 0, 0]), taus[0])
    same = np.tile([3.0, -1.0, 0.5], (3, 1))
    np.testing.assert_allclose(blend_force(same, [0.2, 0.3, 0.5]), same[0], rtol=1e-15)
    np.testing.assert_array_equal(blend_force(taus, [0.5, 0.5, 0.0]), [5.0, 5.0, 0.0])


simplex = st.tuples(*[st.floats(0.0, 1.0)] * 3).filter(lambda w: sum(w) > 1e-3).map(lambda w: np.array(w) / sum(w))
forces = st.lists(st.floats(-1e3, 1e3), min_size=9, max_size=9).map(lambda v: np.array(v).reshape(3, 3))


@given(taus=forces, p=simplex)
def test_blend_in_convex_hull(taus, p):
    out = blend_force(taus, p)
    assert np.all(out >= taus.min(axis=0) - 1e-9) and np.all(out <= taus.max(axis=0) + 1e-9)


def test_fuse_command_examples(rng):
    for _ in range(100):
        tau = effective_matrix(LAYOUT, LIB.params[0]) @ rng.uniform(-200, 200, 4)
        u_hat, u, k = fuse_command(tau, [1.0, 0, 0], LIB, LAYOUT, LIMITS, np.zeros(4), 0.1, epsilon=0.0)
        assert k == 0
        assert np.linalg.norm(LAYOUT.nominal @ u_hat - tau) <= 1e-6
        # with the default damping the residual is exactly eps (B B' + eps I)^-1 tau
        u_hat, _, _ = fuse_command(tau, [1.0, 0, 0], LIB, LAYOUT, LIMITS, np.zeros(4), 0.1)
        B = LAYOUT.nominal
        expected = 1e-6 * np.linalg.solve(B @ B.T + 1e-6 * np.eye(3), tau)
        np.testing.assert_allclose(tau - B @ u_hat, expected, rtol=1e-4, atol=1e-12)
    u_prev = np.array([400.0, -400.0, 100.0, 0.0])
    u_hat, u, _ = fuse_command(np.zeros(3), [1.0, 0, 0], LIB, LAYOUT, LIMITS, u_prev, 0.1)
    np.testing.assert_array_equal(u_hat, 0.0)
    np.testing.assert_array_equal(u, [200.0, -200.0, 0.0, 0.0])
    # tie broken toward the lock: mode II parameters zero thruster 1
    tau = np.array([50.0, 20.0, 5.0])
    u_hat, _, k = fuse_command(tau, [0.5, 0.5, 0.0], LIB, LAYOUT, LIMITS, np.zeros(4), 0.1, locked=1)
    assert k == 1 and u_hat[0] == 0.0


@given(p=simplex, prev=st.lists(st.floats(-500, 500), min_size=4, max_size=4).map(np.array),
       tau=st.lists(st.floats(-2e3, 2e3), min_size=3, max_size=3).map(np.array))
def test_fused_command_rate_feasible(p, prev, tau):
    _, u, _ = fuse_command(tau, p, LIB, LAYOUT, LIMITS, prev, 0.1)
    assert np.max(np.abs(u - prev)) <= LIMITS.rate_max * 0.1 + 1e-9
    assert np.all(np.abs(u) <= 500.0)


# -- timers ----------------------------------------------------------------------


def test_detection_timer_example():
    tm = FaultTimer(t_fault=15.0, true_mode=1)
    for k in range(140, 200):
        t = round(k * 0.1, 10)
        tm.update(t, HIGH_II if k >= 151 else np.array([1.0, 0, 0]), (0.0, 0.0), CFG)
    assert tm.T_det == pytest.approx(1.0, abs=1e-9)
    assert tm.T_det_onset == pytest.approx(0.1, abs=1e-9)


def test_accommodation_timer_examples():
    tm = FaultTimer(t_fault=10.0, true_mode=1)
    for k in range(100, 140):
        tm.update(round(k * 0.1, 10), HIGH_II, (0.01, -0.02), CFG)
    assert tm.T_acc == pytest.approx(1.0, abs=1e-9) and tm.T_acc_onset == 0.0
    # leaving the band before the window completes restarts it
    tm = FaultTimer(t_fault=10.0, true_mode=1)
    errs = {k: (0.3, 0.0) for k in (105,)}
    for k in range(100, 140):
        tm.update(round(k * 0.1, 10), HIGH_II, errs.get(k, (0.0, 0.0)), CFG)
    assert tm.T_acc == pytest.approx(1.6, abs=1e-9)
    assert tm.T_acc_onset == pytest.approx(0.6, abs=1e-9)


def test_timer_ignores_samples_before_fault_and_wrong_mode():
    tm = FaultTimer(t_fault=5.0, true_mode=2)
    for k in range(0, 100):
        tm.update(round(k * 0.1, 10), HIGH_II, (1.0, 1.0), CFG)
    assert tm.T_det is None and tm.T_acc is None
    d = tm.as_dict()
    assert d["t_fault"] == 5.0 and d["T_det"] is None


def test_update_timers_routes_to_latest_fault():
    timers = [FaultTimer(10.0, 1), FaultTimer(20.0, 2)]
    high_iii = np.array([0.01, 0.01, 0.98])
    for k in range(0, 260):
        t = round(k * 0.1, 10)
        p = HIGH_II if t < 20.0 else high_iii
        update_timers(timers, t, p, (0.0, 0.0), CFG)
    assert timers[0].T_det == pytest.approx(0.9, abs=1e-9)
    assert timers[1].T_det == pytest.approx(0.9, abs=1e-9)
    assert timers[1].T_det >= 0.0
