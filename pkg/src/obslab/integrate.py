"""Fixed-step RK4 integration of delay differential equations.

The right-hand side is a *delay functional*: a pure callable
``rhs(t, hist) -> derivative`` where ``hist`` is a :class:`HistoryView` over
the trajectory on [t - r, t] (with ``hist.value(t)`` the current state).
Exogenous inputs are closed over by the caller, evaluated at the stage time
inside the functional.

The step is classical 4-stage Runge-Kutta.  Stage lookups at delayed times use
the dense Hermite history; the final partial step is shortened to land exactly
on the interval end.  No adaptivity: determinism and exact alignment with
sampling instants matter more here than step-size economy.
"""

from __future__ import annotations

import numpy as np

__all__ = ["IntegrationError", "integrate_interval"]

_TINY = 1e-12


class IntegrationError(Exception):
    """Integration failure; carries the time at which it occurred."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t = {t})")
        self.t = t


def integrate_interval(rhs, buf, t0, t1, h):
    """Advance ``buf`` from ``t0`` to ``t1`` with steps of size ``h``.

    ``buf`` must already cover [t0 - r, t0] with its last knot at t0.  One
    knot is appended per accepted step, carrying the derivative returned by
    ``rhs`` at the accepted point, so dense output stays O(h^4) locally.

    Returns ``buf`` (extended in place).
    """
    if h <= 0:
        raise IntegrationError(f"step size must be positive, got {h}")
    if t1 <= t0:
        raise IntegrationError(f"empty interval: t1 = {t1} <= t0 = {t0}")
    if buf.n_knots == 0 or abs(buf.t_last - t0) > _TINY * max(1.0, abs(t0)):
        raise IntegrationError(
            f"buffer last knot {buf.t_last if buf.n_knots else None} does not match t0 = {t0}"
        )
    if buf.window > 0 and h > buf.window * (1 + _TINY):
        raise IntegrationError(
            f"step h = {h} exceeds history window r = {buf.window}"
        )

    t = t0
    x = buf.last_value()
    # fresh k1 at t0: the stored slope may be the history derivative, which
    # jumps to the rhs value at the interval start
    k1 = np.asarray(rhs(t, buf.view(t, x)), dtype=float)
    while t < t1 - _TINY * max(1.0, abs(t1)):
        if t1 - t <= h * (1.0 + 1e-9):
            te = t1  # final (possibly partial) step lands exactly on t1
            step = t1 - t
        else:
            step = h
            te = t + h
        tm = t + 0.5 * step
        k2 = np.asarray(rhs(tm, buf.view(tm, x + 0.5 * step * k1)), dtype=float)
        k3 = np.asarray(rhs(tm, buf.view(tm, x + 0.5 * step * k2)), dtype=float)
        k4 = np.asarray(rhs(te, buf.view(te, x + step * k3)), dtype=float)
        x_new = x + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x_new)):
            raise IntegrationError("non-finite state", t=te)
        slope = np.asarray(rhs(te, buf.view(te, x_new)), dtype=float)
        if not np.all(np.isfinite(slope)):
            raise IntegrationError("non-finite derivative", t=te)
        buf.append(te, x_new, slope)
        t, x, k1 = te, x_new, slope
    return buf


def solve_dde(rhs, initial, r, horizon, h, dim, t0=0.0, retain_full=True):
    """Convenience: build the initial history and integrate over [t0, t0 + horizon].

    ``initial`` follows :func:`obslab.history.history_from`.  The buffer's first
    knot slope at t0 is replaced by the rhs value so the first step sees a
    consistent derivative.
    """
    from .history import history_from

    buf = history_from(initial, t0, r, h, dim)
    buf.retain_full = retain_full
    x0 = buf.last_value()
    m0 = np.asarray(rhs(t0, buf.view(t0, x0)), dtype=float)
    # re-commit the t0 knot with the dynamics-consistent slope (duplicate knot)
    buf.append(t0, x0, m0)
    return integrate_interval(rhs, buf, t0, t0 + horizon, h)
