import math

import numpy as np
import pytest

from obslab.history import HistoryBuffer, history_from
from obslab.integrate import integrate_interval
from obslab.observer import estimate_decay_rate, run_continuous_reo
from obslab.reactor import (
    ReactorField,
    ReactorParams,
    check_compatibility,
    delay_output_identity,
    design_reactor_gains,
    lift_initial_condition,
    lyapunov_V_reactor,
    reactor_delay_system,
    reactor_feedback,
    reactor_reo,
    reactor_reo_constants,
    reconstruct_profile,
    run_reactor_closed_loop,
    run_reactor_observer,
    solve_pde_reactor,
    upwind_transport,
    _transport_step,
)
from obslab.signals import uniform_schedule

P_DEF = ReactorParams()

# nonzero compatible initial field used across the run tests
V0 = lambda z: z + 0.4 * z * np.sin(np.pi * z)
DV0 = lambda z: 1 + 0.4 * (np.sin(np.pi * z) + np.pi * z * np.cos(np.pi * z))
XBAR0 = 1.0


def default_field(m):
    return ReactorField.from_callables(V0, DV0, XBAR0, m)


# -- parameters / compatibility -------------------------------------------------


def test_params_reject_nonpositive():
    with pytest.raises(ValueError):
        ReactorParams(mu=0.0)
    with pytest.raises(ValueError):
        ReactorParams(zeta=-1.0)
    with pytest.raises(ValueError):
        ReactorParams(reaction=lambda x: x + 1.0)  # does not vanish at 0


def test_delay_times_speed_is_one():
    p = ReactorParams(c=2.5)
    assert p.r * p.c == 1.0


def test_compatibility_examples():
    ok, _ = check_compatibility(lambda z: 0.0, lambda z: 0.0, 0.0, P_DEF)
    assert ok
    ok, _ = check_compatibility(lambda z: z, lambda z: 1.0, 1.0, P_DEF)
    assert ok
    ok, res = check_compatibility(lambda z: 1.0, lambda z: 0.0, 0.0, P_DEF)
    assert not ok and res["boundary"] == 1.0


# -- initial-condition lift ------------------------------------------------------


def test_lift_ramp_closed_form():
    # v0(z) = z with zeta = r = 1: xbar(-z) = e^z and the reconstruction
    # integral is exactly z
    st = lift_initial_condition(lambda z: z, lambda z: 1.0, 1.0, P_DEF, m=200)
    for z in (0.0, 0.25, 0.5, 1.0):
        assert st.history.eval(-z)[1] == pytest.approx(np.exp(z), abs=1e-12)
        assert st.history.eval(-z)[0] == 1.0  # constant exit-temperature history
    assert st.reconstruction_residual < 1e-9


def test_lift_zero_field():
    st = lift_initial_condition(lambda z: 0.0, lambda z: 0.0, 0.0, P_DEF, m=50)
    assert np.abs(st.history.knot_values).max() == 0.0


def test_lift_sine_profile_residual():
    # v0(z) = z sin(pi z): v0'(0) = 0, compatible with xbar0 = 0
    v0 = lambda z: z * np.sin(np.pi * z)
    dv0 = lambda z: np.sin(np.pi * z) + np.pi * z * np.cos(np.pi * z)
    st = lift_initial_condition(v0, dv0, 0.0, P_DEF, m=1000)
    assert st.reconstruction_residual < 1e-6


def test_lift_rejects_incompatible():
    with pytest.raises(ValueError):
        lift_initial_condition(lambda z: 1.0, lambda z: 0.0, 0.0, P_DEF, m=50)


# -- gains -----------------------------------------------------------------------


def test_design_gains_pinned_values():
    # pinned from a 40-digit mpmath evaluation of the closed-form selections
    g = design_reactor_gains(P_DEF)
    assert g.R == pytest.approx(1.2642411176571153, rel=1e-14)
    assert g.b == pytest.approx(11.491860241215958, rel=1e-14)
    assert g.Q == pytest.approx(0.5 * (g.b + g.R) * 1.0, rel=1e-14)
    assert g.k1 == pytest.approx(705.0431517274050, rel=1e-13)
    assert g.k2 == pytest.approx(8106.558226789512, rel=1e-13)


def test_design_gains_match_high_precision_oracle():
    import mpmath as mp

    mp.mp.dps = 40
    for mu, zeta, c, phi in [(1, 1, 1, 1), (0.5, 2.0, 0.8, 1.5), (2.0, 0.7, 1.3, 0.6)]:
        p = ReactorParams(mu=mu, zeta=zeta, c=c, lipschitz=phi)
        g = design_reactor_gains(p)
        zm, mm, rm, pm = mp.mpf(zeta), mp.mpf(mu), 1 / mp.mpf(c), mp.mpf(phi)
        em = 1 - mp.e ** (-zm * rm)
        R = 2 * mm * em / zm**2
        b = (4 * pm + (mm + R + 1) * zm) / (zm * em)
        k1 = zm * b + (b + R) * b**2 * zm / (2 * R) + pm * b**2 / (4 * R) \
            + zm * mp.e ** (-zm * rm) / 2 + 1
        k2 = R * zm + b * (b + R) * zm + b * (k1 + zm) - (mm + 1 + b * zm) * b
        assert g.R == pytest.approx(float(R), rel=1e-13)
        assert g.b == pytest.approx(float(b), rel=1e-13)
        assert g.k1 == pytest.approx(float(k1), rel=1e-12)
        assert g.k2 == pytest.approx(float(k2), rel=1e-12)


@pytest.mark.parametrize("mu", [0.3, 1.0, 3.0])
@pytest.mark.parametrize("zeta", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("c", [0.5, 2.0])
@pytest.mark.parametrize("phi", [0.5, 2.0])
def test_gain_positivity_sweep(mu, zeta, c, phi):
    g = design_reactor_gains(ReactorParams(mu=mu, zeta=zeta, c=c, lipschitz=phi))
    assert g.R > 0 and g.b > 0 and g.Q > 0 and g.k1 > 0


def test_design_gains_singular_limits():
    class Stub:
        zeta = 1.0
        lipschitz = 1.0

    stub = Stub()
    stub.mu, stub.r = 0.0, 1.0
    with pytest.raises(ValueError):
        design_reactor_gains(stub)
    stub.mu, stub.r = 1.0, 0.0
    with pytest.raises(ValueError):
        design_reactor_gains(stub)


# -- field solver -----------------------------------------------------------------


def test_pde_zero_data_stays_zero():
    m = 100
    fld = ReactorField(xbar=0.0, profile=np.zeros(m + 1))
    tr = solve_pde_reactor(fld, None, P_DEF, 2.0, P_DEF.r / m, m)
    assert np.abs(tr.profiles).max() == 0.0 and np.abs(tr.xbar).max() == 0.0


def test_pde_rejects_grid_step_mismatch():
    m = 100
    fld = ReactorField(xbar=0.0, profile=np.zeros(m + 1))
    with pytest.raises(ValueError):
        solve_pde_reactor(fld, None, P_DEF, 1.0, 0.011, m)


def test_transport_frozen_source_steady_state():
    # frozen reactor temperature X: the jacket relaxes to X (1 - e^(-zeta z / c))
    m, X = 200, 1.7
    h = P_DEF.r / m
    prof = np.zeros(m + 1)
    for _ in range(int(30 / h)):
        prof = _transport_step(prof, X, X, P_DEF, h)
    z = np.linspace(0, 1, m + 1)
    exact = X * (1.0 - np.exp(-P_DEF.zeta * z / P_DEF.c))
    assert np.abs(prof - exact).max() < 1e-4


def test_upwind_oracle_agrees_on_steady_state():
    m, X = 200, 1.7
    z = np.linspace(0, 1, m + 1)
    exact = X * (1.0 - np.exp(-P_DEF.zeta * z / P_DEF.c))
    vu = upwind_transport(np.zeros(m + 1), lambda t: X, P_DEF, 30.0, m)
    assert np.abs(vu - exact).max() < 5e-3  # first order in 1/m


def test_transport_vs_upwind_transient():
    # prescribed time-varying source, independent discretizations
    m = 400
    h = P_DEF.r / m
    xbar_fn = lambda t: np.sin(2.0 * t)
    prof = np.zeros(m + 1)
    t = 0.0
    for _ in range(int(round(3.0 / h))):
        prof = _transport_step(prof, xbar_fn(t), xbar_fn(t + h), P_DEF, h)
        t += h
    vu = upwind_transport(np.zeros(m + 1), xbar_fn, P_DEF, 3.0, m, cfl=0.5)
    assert np.abs(prof - vu).max() < 2e-2


def test_boundary_pinned_at_zero():
    m = 100
    tr = solve_pde_reactor(default_field(m), lambda t: 0.3 * np.sin(t), P_DEF,
                           3.0, P_DEF.r / m, m)
    assert np.abs(tr.profiles[:, 0]).max() == 0.0


# -- delay representation -----------------------------------------------------------


def test_delay_identity_closed_forms():
    assert delay_output_identity(history_from(0.0, 0.0, 1.0, 0.01, 1), 0.0, P_DEF) == 0.0
    buf1 = history_from(1.0, 0.0, 1.0, 0.005, 1)
    assert delay_output_identity(buf1, 0.0, P_DEF) == pytest.approx(
        1.0 - math.exp(-1.0), abs=1e-9
    )
    bufe = history_from((lambda t: [np.exp(-t)], lambda t: [-np.exp(-t)]),
                        0.0, 1.0, 0.005, 1)
    assert delay_output_identity(bufe, 0.0, P_DEF) == pytest.approx(1.0, abs=1e-9)


def _dde_route(m, horizon, u):
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


def test_pde_delay_equivalence_second_order():
    u = lambda t: 0.5 * np.sin(t)
    errs = {}
    for m in (50, 100, 200):
        ftr = solve_pde_reactor(default_field(m), u, P_DEF, 6.0, P_DEF.r / m, m)
        buf = _dde_route(m, 6.0, u)
        x1 = buf.eval_many(ftr.times)[:, 0]
        errs[m] = np.abs(ftr.v_end - x1).max() / np.abs(ftr.v_end).max()
    assert math.log2(errs[50] / errs[100]) >= 1.8
    assert math.log2(errs[100] / errs[200]) >= 1.8


def test_manifold_invariance_of_delay_route():
    # initialized on the manifold, the delay system keeps x1 equal to the
    # history integral of x2 for all time
    m = 200
    u = lambda t: 0.5 * np.sin(t)
    buf = _dde_route(m, 6.0, u)
    xb = HistoryBuffer(1, P_DEF.r, retain_full=True)
    for t, v, s in zip(buf.knots, buf.knot_values, buf.knot_slopes):
        xb.append(t, v[1:], s[1:])
    times = buf.knots[buf.knots >= 0.0][::5]
    sup_x = np.linalg.norm(buf.knot_values, axis=1).max()
    worst = max(
        abs(delay_output_identity(xb, t, P_DEF) - buf.eval(t)[0]) for t in times
    )
    assert worst <= 1e-6 * (1.0 + sup_x)


# -- profile reconstruction -----------------------------------------------------------


def test_reconstruct_constant_history():
    buf = history_from(1.0, 0.0, 1.0, 0.002, 1)
    prof = reconstruct_profile(buf, 0.0, P_DEF, 400)
    z = np.linspace(0, 1, 401)
    assert np.abs(prof - (1.0 - np.exp(-z))).max() < 1e-6
    assert prof[0] == 0.0


def test_reconstruct_zero_history():
    buf = history_from(0.0, 0.0, 1.0, 0.01, 1)
    assert np.abs(reconstruct_profile(buf, 0.0, P_DEF, 50)).max() == 0.0


# -- Lyapunov functional ---------------------------------------------------------------


def _const_pair(offset):
    plant = history_from([0.0, 0.0], 0.0, 1.0, 0.002, 2)
    obs = history_from(list(offset), 0.0, 1.0, 0.002, 2)
    return plant, obs


def test_lyapunov_zero_on_agreement():
    g = design_reactor_gains(P_DEF)
    plant, obs = _const_pair([0.0, 0.0])
    assert lyapunov_V_reactor(plant, obs, 0.0, g, P_DEF) == 0.0


def test_lyapunov_constant_offsets_closed_form():
    g = design_reactor_gains(P_DEF)
    plant, obs = _const_pair([1.0, 0.0])
    expect = 0.5 * g.R + 0.5 * g.b**2
    assert lyapunov_V_reactor(plant, obs, 0.0, g, P_DEF) == pytest.approx(expect, rel=1e-6)
    plant, obs = _const_pair([0.0, 1.0])
    expect = g.Q * (1.0 - math.exp(-1.0)) + 0.5
    assert lyapunov_V_reactor(plant, obs, 0.0, g, P_DEF) == pytest.approx(expect, rel=1e-6)


# -- feedback ----------------------------------------------------------------------------


def test_feedback_examples():
    assert reactor_feedback(0.0, np.zeros(11), 2.0, P_DEF) == 0.0
    assert reactor_feedback(1.0, np.ones(11), 2.0, P_DEF) == pytest.approx(-3.0, abs=1e-12)
    weak = ReactorParams(mu=0.5, lipschitz=3.0)
    with pytest.raises(ValueError):
        reactor_feedback(1.0, np.ones(11), 1.0, weak)  # mu + 1 + Q <= Phi


# -- observer runs (desk scale) ---------------------------------------------------


M_RUN = 320  # smallest grid with a comfortable RK4 stability margin at k1 ~ 705


def test_reactor_observer_matched_init_stays_small():
    m = M_RUN
    sched = uniform_schedule(0.05, 2.0)
    lift = lift_initial_condition(V0, DV0, XBAR0, P_DEF, m=m)
    tr = run_reactor_observer(default_field(m), lift, sched, None, None, P_DEF,
                              m=m, horizon=2.0)
    init_size = np.linalg.norm(lift.history.knot_values, axis=1).max()
    assert tr.err_sup.max() <= 1e-6 * (1.0 + init_size)


def test_reactor_observer_decay_and_lyapunov():
    m = M_RUN
    sched = uniform_schedule(0.05, 10.0)
    tr = run_reactor_observer(default_field(m), None, sched, None, None, P_DEF,
                              m=m, horizon=10.0)
    t = tr.times
    # V(t) <= 1.05 e^{-zeta t / 2} V(0)
    ref = np.exp(-0.5 * P_DEF.zeta * t) * tr.aux["V"][0]
    assert np.all(tr.aux["V"] <= 1.05 * ref)
    # trailing-window sups of both error channels decay monotonically past one delay
    from obslab.observer import _window_sup

    for name in ("xbar_err", "field_err"):
        ws = _window_sup(t, tr.channel(name), t, P_DEF.r)
        sel = ws[t >= P_DEF.r]
        assert np.all(np.diff(sel) <= 1e-9 * (1.0 + sel[:-1]))
    # empirical rate comfortably exceeds the certified lower bound zeta/4
    rate = estimate_decay_rate(tr, "xbar_err", 1.0)
    assert rate >= 0.75 * (P_DEF.zeta / 4.0)
    assert tr.aux["manifold_residual"].max() <= 1e-6 * (
        1.0 + np.linalg.norm(tr.plant_state, axis=1).max()
    )


def test_reactor_observer_jittered_schedule_snaps_to_grid():
    from obslab.signals import jittered_schedule

    m = M_RUN
    sched = jittered_schedule(0.06, 4.0, seed=11)
    tr = run_reactor_observer(default_field(m), None, sched, None, None, P_DEF,
                              m=m, horizon=4.0)
    resets = tr.times[np.where(np.diff(tr.times) == 0.0)[0]]
    on_grid = np.round(resets * m / P_DEF.r)
    assert np.allclose(resets, on_grid * P_DEF.r / m, atol=1e-12)
    assert estimate_decay_rate(tr, "err_sup", 1.0) > 0


def test_reactor_noise_gain_linearity():
    m = M_RUN
    res = {}
    for eps in (1e-3, 2e-3):
        sched = uniform_schedule(0.05, 12.0)
        tr = run_reactor_observer(default_field(m), None, sched, None,
                                  lambda t, e=eps: e, P_DEF, m=m, horizon=12.0)
        res[eps] = tr.aux["xbar_err"][tr.times >= 9.0].max()
    ratio = res[2e-3] / res[1e-3]
    assert 1.8 <= ratio <= 2.2
    # steady error below the certified noise gain (conservative by a wide margin)
    consts = reactor_reo_constants(P_DEF, design_reactor_gains(P_DEF))
    assert res[1e-3] <= consts.gamma * 1e-3 * 1.1


def test_reactor_continuous_reo_mismatched_decay():
    # continuous-measurement baseline on the delay representation
    m = 100
    h = P_DEF.r / 400
    sysd = reactor_delay_system(P_DEF, 400)
    g = design_reactor_gains(P_DEF)
    reo = reactor_reo(P_DEF, g, 400)
    init_x = lambda t: np.asarray([1.0 - math.exp(-1.0), 1.0])
    tr = run_continuous_reo(sysd, reo, init_x, [0.0, 0.0], horizon=6.0, h=h)
    rate = estimate_decay_rate(tr, "err_sup", 1.0)
    assert rate > 0.1
    del m


def test_closed_loop_drives_state_down():
    m = M_RUN
    sched = uniform_schedule(0.05, 14.0)
    tr = run_reactor_closed_loop(default_field(m), None, sched, None, P_DEF,
                                 m=m, horizon=14.0)
    size = np.abs(tr.plant_state[:, 0]) + np.abs(tr.plant_state[:, 1])
    assert size[-1] <= 1e-3 * size[0]
    # bounded measurement noise keeps everything bounded (ISS witness)
    sched2 = uniform_schedule(0.05, 8.0)
    tr2 = run_reactor_closed_loop(default_field(m), None, sched2,
                                  lambda t: 0.01 * np.sin(3 * t), P_DEF,
                                  m=m, horizon=8.0)
    assert np.abs(tr2.plant_state).max() < 10.0


def test_lyapunov_pointwise_decay_continuous_measurement():
    # the difference quotient of V satisfies dV/dt <= -(zeta/2) V at every grid
    # point along the continuous-measurement injection observer (no sampling)
    p, g = P_DEF, design_reactor_gains(P_DEF)
    mq = 400
    h = p.r / mq
    sysd = reactor_delay_system(p, mq)
    reo = reactor_reo(p, g, mq)
    lift = lift_initial_condition(V0, DV0, XBAR0, p, m=mq)
    joint = HistoryBuffer(4, p.r, retain_full=True)
    for t, v, s in zip(lift.history.knots, lift.history.knot_values,
                       lift.history.knot_slopes):
        joint.append(t, np.concatenate([v, np.zeros(2)]),
                     np.concatenate([s, np.zeros(2)]))

    def rhs(t, hist):
        hx = hist.slice(0, 2)
        hz = hist.slice(2, 4)
        y = hx.now()[0]
        return np.concatenate([
            sysd.plant_rhs(t, hx, 0.0, 0.0), reo.observer_rhs(t, hz, y, 0.0)
        ])

    x0 = joint.last_value()
    joint.append(0.0, x0, rhs(0.0, joint.view(0.0, x0)))
    integrate_interval(rhs, joint, 0.0, 5.0, h)
    ts = joint.knots[joint.knots >= 0.0][::2]
    V = np.asarray([
        lyapunov_V_reactor(joint.view_at(t).slice(0, 2),
                           joint.view_at(t).slice(2, 4), t, g, P_DEF)
        for t in ts
    ])
    dq = np.diff(V) / np.diff(ts)
    tol = 1e-6 * (1.0 + V[0])
    assert np.all(dq <= -0.5 * P_DEF.zeta * V[:-1] + tol)
    # integrated form as well
    assert np.all(V <= 1.05 * np.exp(-0.5 * P_DEF.zeta * ts) * V[0])
