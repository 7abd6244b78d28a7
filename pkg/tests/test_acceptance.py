"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import math

import numpy as np
import pytest

from obslab.highgain import (
    companion_pair,
    design_highgain,
    example_triangular_system,
    place_K,
    run_highgain_observer,
    select_theta,
    solve_lyapunov_P,
)
from obslab.history import HistoryBuffer
from obslab.integrate import integrate_interval, solve_dde
from obslab.observer import (
    _window_sup,
    estimate_decay_rate,
    max_sampling_diameter,
    run_continuous_reo,
    run_sampled_observer,
)
from obslab.reactor import (
    ReactorField,
    ReactorParams,
    design_reactor_gains,
    lift_initial_condition,
    reactor_delay_system,
    reactor_reo,
    reactor_reo_constants,
    run_reactor_closed_loop,
    run_reactor_observer,
    solve_pde_reactor,
)
from obslab.signals import uniform_schedule

P_DEF = ReactorParams()
V0 = lambda z: z + 0.4 * z * np.sin(np.pi * z)
DV0 = lambda z: 1 + 0.4 * (np.sin(np.pi * z) + np.pi * z * np.cos(np.pi * z))
XBAR0 = 1.0

# The certified sampling bound for the reactor observer, evaluated from the
# constructive proof constants, is ~3.2e-5: unit-CFL stepping (h = r/M) and
# the runtime budget make it unusable as a simulation diameter.  Scenario runs
# therefore use delta = 0.05; the bound itself is computed and reported.
DELTA_REACTOR = 0.05


def _report(num, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] acceptance {num}: {detail}", flush=True)
    assert ok, detail


def test_acceptance_01_dde_integrator():
    r = np.pi / 2
    buf = solve_dde(lambda t, h: -h.value(t - r),
                    (lambda t: [np.cos(t)], lambda t: [-np.sin(t)]), r, 10.0, 1e-3, 1)
    ts = buf.knots[buf.knots >= 0]
    cos_err = np.abs(buf.eval_many(ts)[:, 0] - np.cos(ts)).max()
    buf2 = solve_dde(lambda t, h: h.value(t - 1.0), 1.0, 1.0, 2.0, 1e-3, 1)
    steps_err = max(abs(buf2.eval(1.0)[0] - 2.0), abs(buf2.eval(2.0)[0] - 3.5))
    _report(1, cos_err < 1e-6 and steps_err < 1e-8,
            f"cosine DDE max err {cos_err:.2e} (< 1e-6); "
            f"method-of-steps err {steps_err:.2e} (< 1e-8)")


def test_acceptance_02_diameter_bound():
    ok = True
    worst = ""
    for gamma in (0.5, 1.0, 2.0):
        for L in (0.5, 1.0, 2.0):
            om = np.linspace(0.05, 3.0, 50)
            vals = np.asarray([max_sampling_diameter(gamma, L, w) for w in om])
            mono = bool(np.all(np.diff(vals) < 0))
            below = bool(np.all(vals < 1.0 / (gamma * L) - 1e-12))
            # Richardson extrapolation of the omega -> 0 limit
            v1, v2 = (max_sampling_diameter(gamma, L, w) for w in (1e-5, 5e-6))
            lim_err = abs((2 * v2 - v1) - 1.0 / (gamma * L))
            if not (mono and below and lim_err < 1e-6):
                ok = False
                worst = f"(gamma={gamma}, L={L}: mono={mono} below={below} lim_err={lim_err:.1e})"
    _report(2, ok, f"decreasing, below 1/(gamma L) - 1e-12, limit within 1e-6 {worst}")


def _delay_route(m, horizon, u):
    sysd = reactor_delay_system(P_DEF, m)
    lift = lift_initial_condition(V0, DV0, XBAR0, P_DEF, m=m)
    buf = HistoryBuffer(2, P_DEF.r, retain_full=True)
    for t, v, s in zip(lift.history.knots, lift.history.knot_values,
                       lift.history.knot_slopes):
        buf.append(t, v, s)
    rhs = lambda t, hist: sysd.plant_rhs(t, hist, u(t), 0.0)
    x0 = buf.last_value()
    buf.append(0.0, x0, rhs(0.0, buf.view(0.0, x0)))
    integrate_interval(rhs, buf, 0.0, horizon, P_DEF.r / m)
    return buf


def test_acceptance_03_pde_delay_equivalence():
    u = lambda t: 0.5 * np.sin(t)
    errs = {}
    for m in (100, 200, 400):
        fld = ReactorField.from_callables(V0, DV0, XBAR0, m)
        ftr = solve_pde_reactor(fld, u, P_DEF, 10.0, P_DEF.r / m, m)
        x1 = _delay_route(m, 10.0, u).eval_many(ftr.times)[:, 0]
        errs[m] = np.abs(ftr.v_end - x1).max() / np.abs(ftr.v_end).max()
    o1 = math.log2(errs[100] / errs[200])
    o2 = math.log2(errs[200] / errs[400])
    ok = errs[400] < 1e-3 and o1 >= 1.8 and o2 >= 1.8
    _report(3, ok, f"rel err at M=400: {errs[400]:.2e} (< 1e-3); "
                   f"orders {o1:.2f}, {o2:.2f} (>= 1.8)")


def test_acceptance_04_reactor_observer():
    m = 400
    consts = reactor_reo_constants(P_DEF, design_reactor_gains(P_DEF))
    sched = uniform_schedule(DELTA_REACTOR, 12.0)
    fld = ReactorField.from_callables(V0, DV0, XBAR0, m)
    tr = run_reactor_observer(fld, None, sched, None, None, P_DEF, m=m, horizon=12.0)
    t = tr.times
    V = tr.aux["V"]
    v_ok = bool(np.all(V <= 1.05 * np.exp(-0.5 * P_DEF.zeta * t) * V[0]))
    mono_ok = True
    for name in ("xbar_err", "field_err"):
        ws = _window_sup(t, tr.channel(name), t, P_DEF.r)
        sel = ws[t >= P_DEF.r]
        mono_ok &= bool(np.all(np.diff(sel) <= 1e-9 * (1.0 + sel[:-1])))
    rate = estimate_decay_rate(tr, "xbar_err", 1.0)
    ok = v_ok and mono_ok and rate > 0
    _report(4, ok,
            f"delta = {DELTA_REACTOR} (certified proof bound {consts.delta_bound:.2e}); "
            f"V within 1.05 e^(-zeta t/2) V(0): {v_ok}; windowed error channels "
            f"monotone past one delay: {mono_ok}; fitted rate {rate:.3f} > 0")


def test_acceptance_05_reactor_noise_gain():
    m = 320
    fld = ReactorField.from_callables(V0, DV0, XBAR0, m)
    steady = {}
    for eps in (1e-3, 2e-3):
        sched = uniform_schedule(DELTA_REACTOR, 12.0)
        tr = run_reactor_observer(fld, None, sched, None, lambda t, e=eps: e,
                                  P_DEF, m=m, horizon=12.0)
        steady[eps] = tr.aux["xbar_err"][tr.times >= 9.0].max()
    ratio = steady[2e-3] / steady[1e-3]
    _report(5, 1.8 <= ratio <= 2.2,
            f"steady errors {steady[1e-3]:.3e} / {steady[2e-3]:.3e}, "
            f"ratio {ratio:.3f} in [1.8, 2.2]")


def test_acceptance_06_reactor_closed_loop():
    m = 320
    horizon = 10.0  # pinned: the loop is below 1e-3 of its initial size by t = 8
    fld = ReactorField.from_callables(V0, DV0, XBAR0, m)
    sched = uniform_schedule(DELTA_REACTOR, horizon)
    tr = run_reactor_closed_loop(fld, None, sched, None, P_DEF, m=m, horizon=horizon)
    size = np.abs(tr.plant_state[:, 1]) + tr.aux["field_sup"]
    decay = size[-1] / size[0]
    # bounded measurement noise keeps the loop bounded (ISS witness)
    sched2 = uniform_schedule(DELTA_REACTOR, 6.0)
    tr2 = run_reactor_closed_loop(fld, None, sched2, lambda t: 0.01 * np.sin(3 * t),
                                  P_DEF, m=m, horizon=6.0)
    bounded = (np.abs(tr2.plant_state[:, 1]) + tr2.aux["field_sup"]).max() < 10.0
    _report(6, decay <= 1e-3 and bounded,
            f"|xbar| + sup|v| down to {decay:.2e} of initial by t = {horizon} "
            f"(<= 1e-3); noisy loop bounded: {bounded}")


def test_acceptance_07_highgain_design():
    ok = True
    details = []
    for n in (1, 2, 3):
        A, c = companion_pair(n)
        Acl = A + np.outer(place_K(n, -1.0), c)
        P = solve_lyapunov_P(Acl, 1.0)
        res = np.abs(P @ Acl + Acl.T @ P + 2.0 * np.eye(n)).max()
        pd = np.linalg.eigvalsh(P).min() > 0
        ok &= res <= 1e-9 and pd
        details.append(f"n={n}: res {res:.1e}")
    des = design_highgain(2, 0.1, 0.1)
    phi = des.theta * des.mu / (2.0 * des.norm_P)
    om = math.sqrt(3 * 8 * des.norm_P**2 * 0.01 * math.exp(phi * 0.1)
                   / (des.theta * des.mu * des.c1 * phi))
    ok &= om < 1.0 and abs(om - des.omega_sg) < 1e-9
    sel0 = select_theta(des.P, 1.0, 0.0, 0.1, 2)
    ok &= sel0.theta == 1.0
    _report(7, ok, "; ".join(details) + f"; Omega recomputed {om:.4f} < 1; "
            f"Ltilde=0 gives theta = {sel0.theta}")


def test_acceptance_08_highgain_observer():
    sys = example_triangular_system()
    des = design_highgain(2, sys.Ltilde, sys.r)
    sched = uniform_schedule(0.002, 3.0)
    tr = run_highgain_observer(sys, des, sched, np.asarray([0.3, -0.2]),
                               np.asarray([0.0, 0.0]), h=0.001, horizon=3.0)
    rate = estimate_decay_rate(tr, "err_sup", 0.3)
    steady = {}
    for eps in (0.01, 0.02):
        sched_d = uniform_schedule(0.002, 2.5)
        tr_d = run_highgain_observer(sys, des, sched_d, np.asarray([0.3, -0.2]),
                                     np.asarray([0.0, 0.0]), d=lambda t, e=eps: e,
                                     h=0.001, horizon=2.5)
        steady[eps] = tr_d.err_sup[tr_d.times >= 1.5].max()
    ratio = steady[0.02] / steady[0.01]
    ok = (rate >= des.sigma / 2.0 and steady[0.01] <= des.Q3 * 0.01
          and steady[0.02] <= des.Q3 * 0.02 and 1.8 <= ratio <= 2.2)
    _report(8, ok,
            f"rate {rate:.1f} >= sigma/2 = {des.sigma / 2:.2f}; steady err "
            f"{steady[0.01]:.2e} <= Q3 eps = {des.Q3 * 0.01:.2e}; doubling ratio "
            f"{ratio:.3f} in [1.8, 2.2]")


def test_acceptance_09_sampled_continuous_consistency():
    h = 0.0025
    mq = int(round(P_DEF.r / h))
    sysd = reactor_delay_system(P_DEF, mq)
    reo = reactor_reo(P_DEF, design_reactor_gains(P_DEF), mq)
    init_x = lambda t: np.asarray([1.0 - math.exp(-1.0), 1.0])
    init_z = lambda t: np.asarray([0.0, 0.0])
    trc = run_continuous_reo(sysd, reo, init_x, init_z, horizon=3.0, h=h)
    tg = np.arange(0.0, 3.0 + 1e-9, h)
    ec = np.interp(tg, trc.times, trc.err_sup)
    diffs = {}
    for mult in (1, 4):
        delta = h * mult
        sched = uniform_schedule(delta, 3.0)
        trs = run_sampled_observer(sysd, reo, sched, init_x, init_z, h=h, horizon=3.0)
        es = np.interp(tg, trs.times, trs.err_sup)
        diffs[mult] = np.abs(es - ec).max()
    # proportional-to-delta bound, constant pinned from the first calibration
    # run (observed diff/delta ~ 53, stable across delta)
    C_PIN = 80.0
    ok = diffs[1] <= C_PIN * h and diffs[4] <= C_PIN * 4 * h
    _report(9, ok,
            f"delta = h: sup|err_sup diff| {diffs[1]:.3e} <= {C_PIN}*delta = "
            f"{C_PIN * h:.3e}; at 4h: {diffs[4]:.3e} <= {C_PIN * 4 * h:.3e}")


def test_acceptance_10_determinism(tmp_path):
    from obslab.cli import main

    cfg = tmp_path / "det.toml"
    cfg.write_text("""
[scenario]
kind = "highgain_observer"

[schedule]
kind = "jittered"
delta = 0.02
seed = 13

[grid]
h = 0.002
horizon = 1.0

[signals]
xi = { kind = "uniform_random", amplitude = 0.001, seed = 4 }
""")
    outs = [str(tmp_path / f"o{i}") for i in (1, 2)]
    for out in outs:
        assert main(["run", str(cfg), "--out", out, "--no-plots"]) == 0
    b1 = open(f"{outs[0]}/trace.csv", "rb").read()
    b2 = open(f"{outs[1]}/trace.csv", "rb").read()
    _report(10, b1 == b2, f"re-run CSV byte-identical: {b1 == b2} "
            f"({len(b1)} bytes, jittered schedule + seeded noise)")
