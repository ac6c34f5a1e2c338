"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""

import itertools
import json
import time

import numpy as np

from almpc import cli
from almpc.allocation import ThrusterLayout, allocate_damped, effective_matrix
from almpc.backstepping import BackstepGains, augmented_error, c_star, lyapunov_value, m_star_dot
from almpc.dynamics import VehicleState, coriolis, default_hydro, rk4_step, rotation
from almpc.estimation import ModeBelief, ModeLibrary, UkfState, markov_matrix, posterior_update, ukf_step
from almpc.estimation import vehicle_process
from almpc.lmpc import FALLBACK, OPTIMAL, OcpConfig, predict_step
from almpc.scenario import CORE_COLUMNS, auxiliary_decay, read_log, reference
from almpc.supervisor import FusionConfig, SupervisorState, hysteresis_step

HYDRO = default_hydro()
LAYOUT = ThrusterLayout.vectored_x()
GAINS = BackstepGains()
OCP = OcpConfig()
LIB = ModeLibrary()
FUSION = FusionConfig()


def test_criterion_01_structural_properties(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    rot = cor = work = skew = 0.0
    for _ in range(1000):
        psi = rng.uniform(-10.0, 10.0)
        R = rotation(psi)
        rot = max(rot, np.max(np.abs(R.T @ R - np.eye(3))))
        nu = rng.uniform(-3.0, 3.0, 3)
        C = coriolis(nu, HYDRO)
        cor = max(cor, np.max(np.abs(C + C.T)))
        work = max(work, abs(nu @ C @ nu))
        s = rng.uniform(-3.0, 3.0, 3)
        skew = max(skew, abs(s @ (m_star_dot(psi, nu[2], HYDRO) - 2.0 * c_star(nu, psi, HYDRO)) @ s))
    elapsed = time.perf_counter() - t0
    ok = rot <= 1e-12 and cor <= 1e-12 and work <= 1e-10 and skew <= 1e-9 and elapsed < 10.0
    report(1, "structural properties", ok,
           f"rot {rot:.1e}, C+C' {cor:.1e}, nu'C nu {work:.1e}, s'(M*dot-2C*)s {skew:.1e}, {elapsed:.2f} s")
    assert ok


def test_criterion_02_auxiliary_decay(report):
    t, V = auxiliary_decay(case=1, T=30.0)
    rise = np.diff(V)[1:]
    ok = len(t) == 301 and np.max(rise) <= 1e-6
    report(2, "auxiliary-law decay", ok, f"max step increase {np.max(rise):.2e} over {len(rise)} steps, "
           f"V2 {V[0]:.3f} -> {V[-1]:.2e}")
    assert ok


def test_criterion_03_contraction_certificate(runs, report):
    r = runs(2, "almpc")
    c, tel = r.columns, r.telemetry
    checked, worst, violations = 0, -np.inf, 0
    for k, t in enumerate(c["t"]):
        state = VehicleState([c["x"][k], c["y"][k], c["psi"][k]], [c["u"][k], c["v"][k], c["r"][k]])
        ref, ref1 = reference(t, 2), reference(t + OCP.dt, 2)
        for i, m in enumerate(LIB.ids):
            if tel[f"status_{m}"][k] != OPTIMAL:
                continue
            d = np.array([tel[f"d_{m}_{j}"][k] for j in (1, 2, 3)])
            u0 = np.array([tel[f"u0_{m}_{j}"][k] for j in (1, 2, 3, 4)])
            xi0 = augmented_error(state, ref, d)
            xi1 = predict_step(xi0, u0, LIB.params[i], ref, OCP.dt, HYDRO, LAYOUT, GAINS)
            dV = (lyapunov_value(xi1, GAINS, HYDRO, ref1.eta_d[2] + xi1.eta_tilde[2])
                  - lyapunov_value(xi0, GAINS, HYDRO, state.psi))
            slack = dV + OCP.alpha * xi0.eta_tilde @ xi0.eta_tilde
            worst = max(worst, slack)
            violations += slack > 1e-8
            checked += 1
    fallback = float(np.mean(c["status"] == FALLBACK))
    ok = checked > 0 and violations == 0 and fallback < 0.02
    report(3, "contraction certificate", ok,
           f"{checked} optimal solves re-checked, {violations} violations (worst {worst:.1e}), "
           f"fallback steps {100 * fallback:.2f}%")
    assert ok


def _kf_oracle_gap():
    x0 = np.array([1.0, -0.5, 0.4, 0.6, -0.2, 0.1])
    u = np.array([40.0, 10.0, -5.0, 20.0])
    tau = LAYOUT.nominal @ u
    f = lambda x: rk4_step(x, tau, np.zeros(3), 0.1, HYDRO)  # noqa: E731
    A = np.column_stack([(f(x0 + 1e-6 * e) - f(x0 - 1e-6 * e)) / 2e-6 for e in np.eye(6)])
    s = 1e-6
    I = np.eye(6)
    y = f(x0) + np.sqrt(s) * np.array([0.3, -0.2, 0.1, 0.5, -0.4, 0.2])
    ukf, _, S = ukf_step(UkfState(x0, s * I, s * I, s * I), vehicle_process(u, LIB.params[0], 0.1, HYDRO, LAYOUT), y)
    P = A @ (s * I) @ A.T + s * I
    S_kf = P + s * I + 1e-9 * I
    K = P @ np.linalg.inv(S_kf)
    m = f(x0) + K @ (y - f(x0))
    P_post = P - K @ S_kf @ K.T
    return max(np.max(np.abs(ukf.mean - m)), np.max(np.abs(ukf.cov - P_post)) / s)


def test_criterion_04_estimator_suite(runs, report):
    r = runs(2, "almpc")
    norm = np.max(np.abs(r.columns["p_I"] + r.columns["p_II"] + r.columns["p_III"] - 1.0))
    rng = np.random.default_rng(4)
    lse_ok = True
    for _ in range(2000):
        ell = -(10.0 ** rng.uniform(-6.0, 6.0, 3))
        p = posterior_update(rng.dirichlet(np.ones(3)), ell)
        lse_ok &= bool(np.all(np.isfinite(p)) and abs(p.sum() - 1.0) <= 1e-12)
    p = posterior_update(np.full(3, 1 / 3), [-1e6, -1e6 + 1.0, -1e6 + 2.0])
    lse_ok &= bool(np.all(np.isfinite(p)))
    T = markov_matrix(3, 0.98)
    b = ModeBelief.initial()
    for _ in range(5000):
        b = b.update(np.full(3, rng.normal(-6.0, 2.0)), T)
        norm = max(norm, abs(b.p.sum() - 1.0))
    uniform_gap = float(np.max(np.abs(b.p - 1 / 3)))
    kf_gap = _kf_oracle_gap()
    ok = norm <= 1e-12 and lse_ok and uniform_gap <= 1e-3 and kf_gap <= 1e-6
    report(4, "estimator suite", ok, f"normalization {norm:.1e}, log-sum-exp finite {lse_ok}, "
           f"uniform gap {uniform_gap:.1e}, UKF vs KF {kf_gap:.1e}")
    assert ok


def test_criterion_05_detection_accommodation(runs, report):
    faults = runs(1, "almpc").summary["faults"] + runs(2, "almpc").summary["faults"]
    ok = len(faults) == 3 and all(
        f["T_det"] is not None and f["T_det"] <= 1.0 and f["T_acc"] is not None and f["T_acc"] <= 1.5 for f in faults
    )
    detail = "; ".join(
        f"t={f['t_fault']:g}s T_det={f['T_det']} (run onset {f['T_det_onset']}) T_acc={f['T_acc']}" for f in faults
    )
    report(5, "detection/accommodation timing", ok, detail)
    assert ok


def test_criterion_06_tracking_thresholds(runs, report):
    a, b = runs(1, "almpc"), runs(1, "bsc")
    T_acc = a.summary["faults"][0]["T_acc"]
    t = a.columns["t"]
    late = t > 15.0 + (T_acc if T_acc is not None else np.inf) + 2.0
    ss = float(np.max(np.abs(np.column_stack([a.columns["e_x"], a.columns["e_y"]])[late]))) if late.any() else np.inf
    bsc_peak = float(np.max(np.abs(b.columns["e_x"][b.columns["t"] >= 15.0])))
    ok = bool(late.any()) and ss < 0.15 and bsc_peak > 0.5
    report(6, "tracking-error thresholds", ok, f"ALMPC steady-state max |e| {ss:.4f} m, BSC post-fault peak |e_x| "
           f"{bsc_peak:.3f} m")
    assert ok


def test_criterion_07_comparative_ordering(runs, report):
    m = {c: runs(2, c).summary["metrics"] for c in ("almpc", "ampc", "bsc")}
    checks = []
    for metric in ("RMSE", "IAE"):
        for ax in ("x", "y"):
            checks.append(m["almpc"][metric][ax] < m["ampc"][metric][ax] < m["bsc"][metric][ax])
    checks.append(m["almpc"]["RMSE"]["psi"] <= m["ampc"]["RMSE"]["psi"])
    ok = all(checks)
    detail = "; ".join(
        f"{metric} {ax} " + "/".join(f"{m[c][metric][ax]:.4f}" for c in ("almpc", "ampc", "bsc"))
        for metric, ax in (("RMSE", "x"), ("RMSE", "y"), ("RMSE", "psi"), ("IAE", "x"), ("IAE", "y"))
    )
    report(7, "comparative ordering ALMPC/AMPC/BSC", ok, detail)
    assert ok


def test_criterion_08_jensen_blending(runs, report):
    c = runs(2, "almpc").columns
    mask = c["jensen_checked"] == 1
    n = int(mask.sum())
    held = int(np.sum(c["jensen_margin"][mask] <= 1e-6))
    ok = n > 0 and held >= 0.95 * n
    report(8, "Jensen blending check", ok, f"{held}/{n} blended steps satisfy the contraction inequality")
    assert ok


def test_criterion_09_determinism_io(tmp_path, report):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"case": 2, "T": 4.0, "schedule": [[2.0, "II"]]}))
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["--config", str(cfg), "--out", str(o), "--dump-telemetry"]) for o in outs]
    identical = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
                    for f in ("run.csv", "telemetry.csv", "summary.json"))
    back = read_log(outs[0])
    text = (outs[0] / "run.csv").read_text().splitlines()
    # re-serializing the parsed columns gives the same text
    rows = [",".join(str(back.columns[col][i]) if col == "status" else
                     (str(int(back.columns[col][i])) if back.columns[col].dtype.kind == "i"
                      else repr(float(back.columns[col][i]))) for col in CORE_COLUMNS) for i in range(back.n_rows)]
    roundtrip = text[0] == ",".join(CORE_COLUMNS) and text[1:] == rows
    rng = np.random.default_rng(9)
    worst = 0.0
    for f in LIB.params:
        B = effective_matrix(LAYOUT, f)
        for _ in range(1000):
            tau = B @ rng.uniform(-500.0, 500.0, 4)
            worst = max(worst, np.linalg.norm(B @ allocate_damped(tau, f, LAYOUT, epsilon=0.0) - tau))
    ok = codes == [0, 0] and identical and roundtrip and worst <= 1e-6
    report(9, "determinism and I/O", ok, f"byte-identical {identical}, CSV round-trip {roundtrip}, "
           f"allocation residual {worst:.1e}")
    assert ok


def _lock_trace(levels, cfg):
    high, mid = np.array([0.015, 0.97, 0.015]), np.array([0.15, 0.7, 0.15])
    sup, out = SupervisorState(), []
    for lvl in levels:
        sup = hysteresis_step(sup, high if lvl else mid, cfg)
        out.append(sup.locked_mode == 1)
    return out


def _dwell_rule(levels, n_on, n_off):
    locked, count, out = False, 0, []
    for lvl in levels:
        count = count + 1 if (lvl != locked) else 0
        if count == (n_off if locked else n_on):
            locked, count = not locked, 0
        out.append(locked)
    return out


def test_criterion_10_hysteresis(report):
    total = mismatches = 0
    for cfg, n_on, n_off, max_len in ((FUSION, 10, 5, 14), (FusionConfig(N_on=3, N_off=2), 3, 2, 12)):
        for n in range(1, max_len + 1):
            for levels in itertools.product((0, 1), repeat=n):
                total += 1
                mismatches += _lock_trace(levels, cfg) != _dwell_rule(levels, n_on, n_off)
    lock_at = _lock_trace([1] * 12, FUSION).index(True) + 1
    unlock_at = _lock_trace([1] * 10 + [0] * 7, FUSION)[10:].index(False) + 1
    ok = mismatches == 0 and lock_at == 10 and unlock_at == 5
    report(10, "hysteresis dwell logic", ok, f"{total} sequences, {mismatches} mismatches, lock after {lock_at}, "
           f"unlock after {unlock_at}")
    assert ok
