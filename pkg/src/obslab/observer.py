"""Generic sampled-data observer framework.

Given a plant with delayed dynamics and a continuous-measurement robust
exponential observer for it, the sampled-data observer feeds the observer an
inter-sample output predictor ``w`` instead of the (unavailable) continuous
measurement: between samples ``w`` integrates the modeled output derivative,
and at every sampling instant it is reset to the measured output.

The certified sampling-diameter bound, the resulting error envelope, and the
runners for the continuous baseline, the sampled observer, and the
observer-based closed loop all live here.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .history import HistoryBuffer, history_from
from .integrate import IntegrationError, integrate_interval
from .signals import validate_schedule
from .trace import SimTrace

__all__ = [
    "ObservedSystem",
    "ReoSpec",
    "EnvelopeParams",
    "max_sampling_diameter",
    "choose_omega",
    "error_envelope",
    "run_continuous_reo",
    "run_sampled_observer",
    "run_closed_loop",
    "estimate_decay_rate",
]

_ZERO_TOL = 1e-9


def _zero_history(dim, r):
    buf = HistoryBuffer(dim, r, retain_full=True)
    for t in (-r, -0.5 * r, 0.0) if r > 0 else (0.0,):
        buf.append(t, np.zeros(dim), np.zeros(dim))
    return buf


@dataclass
class ObservedSystem:
    """Plant with delayed dynamics, output map, and output-derivative map.

    plant_rhs(t, hist, u, d) -> dx/dt, with hist a window view over [t-r, t].
    output_map(hist) -> y in R^k.
    output_derivative_map(hist, u, d) -> dy/dt in R^k (the modeled derivative
    of the output along trajectories, which the predictor integrates).
    """

    plant_rhs: Callable
    output_map: Callable
    output_derivative_map: Callable
    r: float
    n: int
    k: int = 1
    m: int = 1
    q: int = 1

    def __post_init__(self):
        zx = _zero_history(self.n, self.r).view()
        h0 = np.atleast_1d(np.asarray(self.output_map(zx), dtype=float))
        r0 = np.atleast_1d(
            np.asarray(
                self.output_derivative_map(zx, np.zeros(self.m), np.zeros(self.q)),
                dtype=float,
            )
        )
        if np.any(np.abs(h0) > _ZERO_TOL):
            raise ValueError(f"output map does not vanish on the zero history: h(0) = {h0}")
        if np.any(np.abs(r0) > _ZERO_TOL):
            raise ValueError(
                f"output derivative map does not vanish at the origin: R(0,0,0) = {r0}"
            )


def _identity_lift(z_rows):
    return z_rows


@dataclass
class ReoSpec:
    """A robust exponential observer with caller-certified convergence data.

    observer_rhs(t, hist_z, y, u) -> dz/dt.
    state_lift maps observer state rows (N, l) to estimated plant state rows
    (N, n), applied pointwise in time (identity by default).
    gamma, sigma: certified linear noise gain and decay rate.
    a: class-K_inf overshoot function for the initial-condition term.
    g: class-K disturbance gain (None when no disturbance channel is certified).
    """

    observer_rhs: Callable
    l: int
    state_lift: Callable = _identity_lift
    gamma: float = 1.0
    sigma: float = 1.0
    a: Callable = lambda s: s
    g: Optional[Callable] = None

    def __post_init__(self):
        if self.gamma <= 0 or self.sigma <= 0:
            raise ValueError("gamma and sigma must be positive")
        if abs(self.a(0.0)) > _ZERO_TOL:
            raise ValueError("a must satisfy a(0) = 0")


class _LiftedView:
    """History view composed with a pointwise state lift."""

    __slots__ = ("view", "lift")

    def __init__(self, view, lift):
        self.view = view
        self.lift = lift

    @property
    def t_ref(self):
        return self.view.t_ref

    def now(self):
        return self.values(np.asarray([self.view.t_ref]))[0]

    def at(self, theta):
        return self.values(np.asarray([self.view.t_ref + theta]))[0]

    def value(self, t):
        return self.values(np.asarray([t], dtype=float))[0]

    def values(self, times):
        return self.lift(self.view.values(times))


# -- sampling-diameter bound and envelope ----------------------------------


def max_sampling_diameter(gamma, L, omega):
    """Largest certified sampling diameter for gains (gamma, L) at rate omega.

    Returns (1/omega) * ln(1 + omega / (gamma * L)), or inf when L == 0.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if omega <= 0:
        raise ValueError(f"omega must be positive, got {omega}")
    if L < 0:
        raise ValueError(f"L must be nonnegative, got {L}")
    if L == 0:
        return math.inf
    return math.log1p(omega / (gamma * L)) / omega


def choose_omega(gamma, L, sigma, delta, tol=1e-10):
    """Largest omega in (0, sigma] whose diameter bound admits ``delta``.

    The bound is strictly decreasing in omega, so this is either sigma itself
    or the bisection root of bound(omega) = delta.  Raises if even the
    omega -> 0 supremum 1/(gamma*L) does not admit delta.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if L == 0:
        return sigma
    if max_sampling_diameter(gamma, L, sigma) > delta:
        return sigma
    if delta >= 1.0 / (gamma * L):
        raise ValueError(
            f"delta = {delta} exceeds the certified supremum 1/(gamma L) = {1.0 / (gamma * L)}"
        )
    lo, hi = 0.0, sigma  # bound(lo+) > delta >= bound(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if max_sampling_diameter(gamma, L, mid) > delta:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class EnvelopeParams:
    """Constants of the sampled-data error envelope.

    B = gamma * L * (exp(omega*delta) - 1) / omega must stay below 1 for the
    small-gain argument to close; the amplification (1 - B)^-1 then scales the
    continuous-measurement estimate.
    """

    gamma: float
    L: float
    omega: float
    delta: float
    g: Optional[Callable] = None
    kappa: Callable = lambda s: s  # identity: the shipped systems are affine in d

    B: float = field(init=False)
    amplification: float = field(init=False)

    def __post_init__(self):
        if self.gamma <= 0 or self.omega <= 0 or self.delta < 0 or self.L < 0:
            raise ValueError("need gamma > 0, omega > 0, delta >= 0, L >= 0")
        self.B = self.gamma * self.L * math.expm1(self.omega * self.delta) / self.omega
        if self.B >= 1.0:
            raise ValueError(
                f"small-gain constant B = {self.B:.6g} >= 1: envelope undefined "
                f"(delta = {self.delta} too large for (gamma, L, omega))"
            )
        self.amplification = 1.0 / (1.0 - self.B)

    def g_tilde(self, s):
        base = self.g(s) if self.g is not None else 0.0
        return self.amplification * (base + self.gamma * self.delta * self.kappa(s))


def error_envelope(params, a_of_init, noise, dist, times):
    """Theoretical error envelope on a time grid.

    amp * e^(-omega t) * a_of_init
      + amp * gamma * e^(omega delta) * sup_{s<=t} |noise(s)| e^(-omega (t-s))
      + sup_{s<=t} g_tilde(|dist(s)|)

    ``noise`` and ``dist`` are scalar time functions (or arrays on ``times``);
    the sups run over the grid points up to t.  Returns an array on ``times``.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    amp, om = params.amplification, params.omega
    out = amp * np.exp(-om * times) * a_of_init

    nz = np.abs(_sample(noise, times))
    if np.any(nz > 0):
        # sup_{s<=t} nz(s) e^{-om (t-s)} = e^{-om t} * runmax(nz e^{om s})
        scaled = np.maximum.accumulate(nz * np.exp(om * times))
        out = out + amp * params.gamma * math.exp(om * params.delta) * np.exp(-om * times) * scaled

    dz = np.abs(_sample(dist, times))
    if np.any(dz > 0):
        out = out + np.maximum.accumulate(np.asarray([params.g_tilde(s) for s in dz]))
    return out


def _sample(sig, times):
    if sig is None:
        return np.zeros_like(times)
    if callable(sig):
        return np.asarray([float(sig(t)) for t in times])
    arr = np.asarray(sig, dtype=float)
    if arr.shape != times.shape:
        raise ValueError("signal array must match the time grid")
    return arr


# -- runners ----------------------------------------------------------------


def _as_signal(sig):
    if sig is None:
        return lambda t: 0.0
    return sig


def _joint_history(sys, reo, init_x, init_z, h, w0=None):
    n, l = sys.n, reo.l
    k = sys.k
    dim = n + l + (k if w0 is not None else 0)
    bx = history_from(init_x, 0.0, sys.r, h, n)
    bz = history_from(init_z, 0.0, sys.r, h, l)
    buf = HistoryBuffer(dim, sys.r, retain_full=True)
    knots = bx.knots
    vx, mx = bx.knot_values, bx.knot_slopes
    vz = bz.eval_many(np.clip(knots, bz.t_first, bz.t_last))
    if len(knots) > 2:
        mz = np.gradient(vz, knots, axis=0, edge_order=2)
    elif len(knots) == 2:
        mz = np.gradient(vz, knots, axis=0)
    else:
        mz = np.zeros_like(vz)
    for i, t in enumerate(knots):
        row = [vx[i], vz[i]]
        slope = [mx[i], mz[i]]
        if w0 is not None:
            row.append(w0)
            slope.append(np.zeros(k))
        buf.append(t, np.concatenate(row), np.concatenate(slope))
    return buf


def _window_sup(knots, point_err, times, r):
    """Rolling max of point_err over trailing windows [t - r, t], O(N)."""
    out = np.empty(len(times))
    dq = deque()  # knot indices with decreasing point_err
    j = 0
    for i, t in enumerate(times):
        while j < len(knots) and knots[j] <= t + 1e-12:
            while dq and point_err[dq[-1]] <= point_err[j]:
                dq.pop()
            dq.append(j)
            j += 1
        lo = t - r - 1e-12
        while dq and knots[dq[0]] < lo:
            dq.popleft()
        out[i] = point_err[dq[0]] if dq else 0.0
    return out


def _build_trace(sys, reo, buf, xi_fn):
    n, l = sys.n, reo.l
    knots = buf.knots
    vals = buf.knot_values
    mask = knots >= -1e-12
    times = knots[mask]
    rows = vals[mask]
    x_rows = rows[:, :n]
    z_rows = rows[:, n : n + l]
    xhat_all = reo.state_lift(vals[:, n : n + l])
    point_err = np.linalg.norm(xhat_all - vals[:, :n], axis=1)
    err_sup = _window_sup(knots, point_err, times, sys.r)
    has_w = buf.dim > n + l
    w_rows = rows[:, n + l :] if has_w else np.zeros((len(times), sys.k))
    y_rows = np.empty((len(times), sys.k))
    for i, t in enumerate(times):
        # output on the committed trajectory, with additive measurement noise
        y_rows[i] = np.atleast_1d(sys.output_map(buf.view_at(t, lo=0, hi=n))) + xi_fn(t)
    return SimTrace(
        times=times.copy(),
        plant_state=x_rows.copy(),
        observer_state=z_rows.copy(),
        predictor_w=w_rows.copy(),
        output_y=y_rows,
        err_sup=err_sup,
    )


def run_continuous_reo(sys, reo, init_x, init_z, u=None, d=None, xi=None, horizon=10.0, h=0.01):
    """Co-integrate plant and observer with the output fed continuously
    (the continuous-measurement baseline the sampled design starts from)."""
    if h > sys.r > 0:
        raise IntegrationError(f"h = {h} must not exceed the delay r = {sys.r}")
    u_fn, d_fn, xi_fn = _as_signal(u), _as_signal(d), _as_signal(xi)
    n, l = sys.n, reo.l

    def rhs(t, hist):
        hx = hist.slice(0, n)
        hz = hist.slice(n, n + l)
        uv, dv = u_fn(t), d_fn(t)
        y = np.atleast_1d(sys.output_map(hx)) + xi_fn(t)
        dx = np.atleast_1d(sys.plant_rhs(t, hx, uv, dv))
        dz = np.atleast_1d(reo.observer_rhs(t, hz, y, uv))
        return np.concatenate([dx, dz])

    buf = _joint_history(sys, reo, init_x, init_z, h)
    x0 = buf.last_value()
    buf.append(0.0, x0, np.asarray(rhs(0.0, buf.view(0.0, x0)), dtype=float))
    integrate_interval(rhs, buf, 0.0, horizon, h)
    return _build_trace(sys, reo, buf, xi_fn)


def _sampled_loop(sys, reo, sched, init_x, init_z, u_fn, d_fn, xi_fn, h, horizon,
                  u_zoh_from=None):
    """Shared predictor-reset loop for the sampled observer and the closed loop.

    When ``u_zoh_from`` is given, u(t) is recomputed at every sampling instant
    from the lifted observer history and held constant over the interval
    (zero-order hold); otherwise u(t) = u_fn(t).
    """
    if not validate_schedule(sched, sched.diameter):
        raise ValueError("invalid sampling schedule")
    if sys.r > 0 and h > sys.r:
        raise IntegrationError(f"h = {h} must not exceed the delay r = {sys.r}")
    gaps = np.diff(sched.instants)
    if len(gaps) and h > gaps.min() + 1e-12:
        raise IntegrationError(f"h = {h} exceeds the smallest sampling gap {gaps.min()}")
    if sched.horizon < horizon - 1e-12:
        raise ValueError("sampling schedule does not cover the horizon")
    n, l, k = sys.n, reo.l, sys.k

    def lifted(hz):
        return hz if reo.state_lift is _identity_lift else _LiftedView(hz, reo.state_lift)

    u_hold = {"u": None}

    def u_at(t):
        if u_zoh_from is not None:
            return u_hold["u"]
        return u_fn(t)

    def rhs(t, hist):
        hx = hist.slice(0, n)
        hz = hist.slice(n, n + l)
        w = hist.value(t)[n + l :]
        uv, dv = u_at(t), d_fn(t)
        dx = np.atleast_1d(sys.plant_rhs(t, hx, uv, dv))
        dz = np.atleast_1d(reo.observer_rhs(t, hz, w, uv))
        dw = np.atleast_1d(sys.output_derivative_map(lifted(hz), uv, np.zeros(sys.q)))
        return np.concatenate([dx, dz, dw])

    # initialize with w == the tau_0 measurement so the t=0 reset is a no-op row
    bx0 = history_from(init_x, 0.0, sys.r, h, n)
    w_init = np.atleast_1d(sys.output_map(bx0.view())) + xi_fn(0.0)
    buf = _joint_history(sys, reo, init_x, init_z, h, w0=np.asarray(w_init, dtype=float))

    instants = [t for t in sched.instants if t < horizon - 1e-12]
    bounds = instants + [horizon]
    for i, tau in enumerate(instants):
        # reset the predictor to the measured output; the pre-reset value
        # stays in the buffer as the left-limit knot at tau
        v = buf.last_value()
        hx = buf.view_at(tau, lo=0, hi=n)
        v[n + l :] = np.atleast_1d(sys.output_map(hx)) + xi_fn(tau)
        if u_zoh_from is not None:
            u_hold["u"] = np.atleast_1d(
                u_zoh_from(tau, lifted(buf.view_at(tau, lo=n, hi=n + l)))
            )
        slope = np.asarray(rhs(tau, buf.view(tau, v)), dtype=float)
        buf.append(tau, v, slope)
        integrate_interval(rhs, buf, tau, bounds[i + 1], h)
    return buf


def run_sampled_observer(sys, reo, sched, init_x, init_z, u=None, d=None, xi=None,
                         h=0.01, horizon=None):
    """Sampled-data observer run: predictor integrated between samples, reset
    to the measured output at each sampling instant.

    The trace records the predictor on both sides of every reset (duplicated
    rows at sampling instants).
    """
    u_fn, d_fn, xi_fn = _as_signal(u), _as_signal(d), _as_signal(xi)
    horizon = sched.horizon if horizon is None else horizon
    buf = _sampled_loop(sys, reo, sched, init_x, init_z, u_fn, d_fn, xi_fn, h, horizon)
    return _build_trace(sys, reo, buf, xi_fn)


def run_closed_loop(sys, reo, feedback, sched, init_x, init_z, d=None, xi=None,
                    h=0.01, horizon=None):
    """Observer-based sampled-data output feedback: u = feedback(xhat history
    at the last sample), held constant between samples (zero-order hold)."""
    d_fn, xi_fn = _as_signal(d), _as_signal(xi)
    horizon = sched.horizon if horizon is None else horizon
    buf = _sampled_loop(
        sys, reo, sched, init_x, init_z, None, d_fn, xi_fn, h, horizon,
        u_zoh_from=feedback,
    )
    return _build_trace(sys, reo, buf, xi_fn)


def estimate_decay_rate(trace, channel, t_start, floor=1e-12):
    """Least-squares exponential decay rate of a positive trace channel.

    Fits -log(channel) against t on [t_start, end], ignoring samples at or
    below ``floor``.  Needs at least 4 usable samples.
    """
    ch = trace.channel(channel) if isinstance(trace, SimTrace) else np.asarray(trace)
    times = trace.times if isinstance(trace, SimTrace) else None
    if times is None:
        raise TypeError("estimate_decay_rate expects a SimTrace")
    mask = (times >= t_start) & (ch > floor)
    if mask.sum() < 4:
        raise ValueError(
            f"fewer than 4 usable samples above the {floor} floor after t = {t_start}"
        )
    slope = np.polyfit(times[mask], -np.log(ch[mask]), 1)[0]
    return float(slope)
