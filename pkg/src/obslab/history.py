"""Dense trajectory history with cubic Hermite interpolation.

A :class:`HistoryBuffer` stores a vector trajectory as (time, value, slope)
knots and evaluates it anywhere inside the stored span.  It is the state
carrier for delay-system integration: the integrator appends one knot per
accepted step and delayed lookups interpolate between knots.

Duplicate knots (two knots at the same time with different values) encode
jumps, e.g. a predictor reset at a sampling instant.  Evaluation at the shared
time returns the later knot, so trajectories are right-continuous at jumps.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "HistoryBuffer",
    "HistoryView",
    "OutOfHistoryError",
    "history_from",
    "sup_norm_window",
]

# slack for time comparisons at span boundaries, scaled by the local grid step
_EDGE_RTOL = 1e-9


class OutOfHistoryError(Exception):
    """Raised when a lookup falls outside the stored time span."""


def _hermite(dt, tau, y0, y1, m0, m1):
    """Cubic Hermite on one segment.

    dt: segment width, tau: offset from the left knot in [0, dt].
    Broadcasts over leading axes of tau (y*, m* have shape (..., dim)).
    """
    s = tau / dt
    s2 = s * s
    s3 = s2 * s
    h00 = 2.0 * s3 - 3.0 * s2 + 1.0
    h10 = s3 - 2.0 * s2 + s
    h01 = -2.0 * s3 + 3.0 * s2
    h11 = s3 - s2
    return h00 * y0 + (h10 * dt) * m0 + h01 * y1 + (h11 * dt) * m1


class HistoryBuffer:
    """Growable record of a trajectory on a sliding window.

    Parameters
    ----------
    dim : state dimension.
    window : retention window r >= 0.  Lookups are guaranteed to work on
        [last - window, last]; older knots may be pruned unless
        ``retain_full`` is set.
    retain_full : keep every knot (needed when the buffer doubles as the
        full-run trace).
    """

    def __init__(self, dim, window, retain_full=False):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        if window < 0:
            raise ValueError(f"window must be >= 0, got {window}")
        self.dim = int(dim)
        self.window = float(window)
        self.retain_full = bool(retain_full)
        cap = 256
        self._t = np.empty(cap)
        self._y = np.empty((cap, self.dim))
        self._m = np.empty((cap, self.dim))
        self._n = 0

    # -- construction -----------------------------------------------------

    def append(self, t, value, slope):
        value = np.asarray(value, dtype=float)
        slope = np.asarray(slope, dtype=float)
        if value.shape != (self.dim,) or slope.shape != (self.dim,):
            raise ValueError(
                f"expected shape ({self.dim},), got value {value.shape}, slope {slope.shape}"
            )
        if self._n > 0 and t < self._t[self._n - 1]:
            raise ValueError(
                f"knots must be non-decreasing: {t} < {self._t[self._n - 1]}"
            )
        if self._n == self._t.shape[0]:
            self._grow()
        self._t[self._n] = t
        self._y[self._n] = value
        self._m[self._n] = slope
        self._n += 1
        if not self.retain_full:
            self._prune()

    def _grow(self):
        cap = 2 * self._t.shape[0]
        self._t = np.concatenate([self._t, np.empty(self._t.shape[0])])
        self._y = np.vstack([self._y, np.empty_like(self._y)])
        self._m = np.vstack([self._m, np.empty_like(self._m)])
        del cap

    def _prune(self):
        # drop knots older than last - (window + one local step), keeping one
        # knot at or before the cut so interpolation still covers the window
        if self._n < 3:
            return
        t = self._t[: self._n]
        step = t[-1] - t[-2]
        if step <= 0 and self._n >= 3:
            step = max(t[-1] - t[-3], 0.0)
        cut = t[-1] - (self.window + step)
        first = int(np.searchsorted(t, cut, side="right")) - 1
        # compact lazily: only when at least a quarter of the storage is dead
        if first <= 0 or first < self._n // 4:
            return
        keep = self._n - first
        self._t[:keep] = self._t[first : self._n]
        self._y[:keep] = self._y[first : self._n]
        self._m[:keep] = self._m[first : self._n]
        self._n = keep

    # -- access -----------------------------------------------------------

    @property
    def n_knots(self):
        return self._n

    @property
    def t_first(self):
        self._require_nonempty()
        return float(self._t[0])

    @property
    def t_last(self):
        self._require_nonempty()
        return float(self._t[self._n - 1])

    @property
    def knots(self):
        return self._t[: self._n]

    @property
    def knot_values(self):
        return self._y[: self._n]

    @property
    def knot_slopes(self):
        return self._m[: self._n]

    def last_value(self):
        self._require_nonempty()
        return self._y[self._n - 1].copy()

    def last_slope(self):
        self._require_nonempty()
        return self._m[self._n - 1].copy()

    def _require_nonempty(self):
        if self._n == 0:
            raise OutOfHistoryError("empty history buffer")

    def _edge_tol(self):
        t = self._t[: self._n]
        span = max(t[-1] - t[0], 1.0)
        return _EDGE_RTOL * span

    def eval(self, t):
        """State vector at time ``t`` (piecewise cubic Hermite, exact at knots)."""
        return self.eval_many(np.asarray([t], dtype=float))[0]

    def eval_many(self, times):
        """Vectorized :meth:`eval` over an array of times; returns (len, dim)."""
        self._require_nonempty()
        times = np.asarray(times, dtype=float)
        t = self._t[: self._n]
        tol = self._edge_tol()
        if times.size and (times.min() < t[0] - tol or times.max() > t[-1] + tol):
            bad = times[(times < t[0] - tol) | (times > t[-1] + tol)][0]
            raise OutOfHistoryError(
                f"time {bad} outside stored span [{t[0]}, {t[-1]}]"
            )
        q = np.clip(times, t[0], t[-1])
        # right-side search makes evaluation at a duplicated knot time pick the
        # later knot (right-continuity at jumps) and reproduce knots exactly
        idx = np.searchsorted(t, q, side="right")
        at_knot = idx > 0
        at_knot[at_knot] &= t[idx[at_knot] - 1] == q[at_knot]
        out = np.empty((q.shape[0], self.dim))
        if at_knot.any():
            out[at_knot] = self._y[: self._n][idx[at_knot] - 1]
        mid = ~at_knot
        if mid.any():
            i1 = idx[mid]
            i0 = i1 - 1
            dt = (t[i1] - t[i0])[:, None]
            tau = (q[mid] - t[i0])[:, None]
            y = self._y[: self._n]
            m = self._m[: self._n]
            out[mid] = _hermite(dt, tau, y[i0], y[i1], m[i0], m[i1])
        return out

    def view(self, t_stage=None, x_stage=None):
        """A :class:`HistoryView` of this buffer, optionally overlaying an
        in-flight stage point beyond the last committed knot."""
        return HistoryView(self, t_stage=t_stage, x_stage=x_stage)

    def view_at(self, t_ref, lo=0, hi=None):
        """A view pinned at reference time ``t_ref`` (lookups clipped there)."""
        return HistoryView(self, lo=lo, hi=hi, t_ref=t_ref)


class HistoryView:
    """Read-only window accessor handed to delay functionals.

    Every view carries a reference time ``t_ref`` (the "now" of the segment
    x_t it represents); lookups past it are clipped to it, so functionals can
    never peek beyond the point they are evaluated at.  ``now()`` and
    ``at(theta)`` address the segment relative to ``t_ref``, matching how
    delay functionals are written.

    During an integration step the view additionally overlays the in-flight
    stage point ``(t_stage, x_stage)``: lookups at the stage time return the
    stage state, lookups in the open sliver between the last committed knot
    and the stage time clamp to the last committed knot (a sub-step boundary
    case only, see the integrator preconditions).

    ``lo``/``hi`` select a contiguous component range, so one joint buffer can
    serve functionals that only see a slice of the state.
    """

    __slots__ = ("buf", "t_stage", "x_stage", "lo", "hi", "t_ref")

    def __init__(self, buf, t_stage=None, x_stage=None, lo=0, hi=None, t_ref=None):
        self.buf = buf
        self.t_stage = t_stage
        self.x_stage = None if x_stage is None else np.asarray(x_stage, dtype=float)
        self.lo = lo
        self.hi = buf.dim if hi is None else hi
        if t_ref is None:
            t_ref = t_stage if t_stage is not None else buf.t_last
        self.t_ref = t_ref

    def slice(self, lo, hi):
        """View restricted to components [lo, hi) of this view."""
        return HistoryView(
            self.buf,
            t_stage=self.t_stage,
            x_stage=self.x_stage,
            lo=self.lo + lo,
            hi=self.lo + hi,
            t_ref=self.t_ref,
        )

    @property
    def dim(self):
        return self.hi - self.lo

    def now(self):
        """State at the reference time (the segment value at offset 0)."""
        return self.values(np.asarray([self.t_ref]))[0]

    def at(self, theta):
        """State at offset ``theta`` <= 0 from the reference time."""
        return self.values(np.asarray([self.t_ref + theta]))[0]

    def value(self, t):
        return self.values(np.asarray([t], dtype=float))[0]

    def values(self, times):
        times = np.minimum(np.asarray(times, dtype=float), self.t_ref)
        if self.t_stage is None:
            return self.buf.eval_many(times)[:, self.lo : self.hi]
        t_comm = self.buf.t_last
        tol = self.buf._edge_tol()
        out = np.empty((times.shape[0], self.buf.dim))
        # the stage point wins even when it coincides with the last committed
        # knot: a reset evaluation overlays a state that differs from it
        at_stage = times >= self.t_stage - tol
        if at_stage.any():
            out[at_stage] = self.x_stage
        past = ~at_stage & (times <= t_comm + tol)
        if past.any():
            out[past] = self.buf.eval_many(np.minimum(times[past], t_comm))
        # open sliver (t_comm, t_stage): clamp to the last committed knot
        sliver = ~at_stage & ~past
        if sliver.any():
            out[sliver] = self.buf.last_value()
        return out[:, self.lo : self.hi]


def history_from(initial, t_end, window, step, dim):
    """Build a warm :class:`HistoryBuffer` covering [t_end - window, t_end].

    ``initial`` may be a scalar/vector (constant history), a callable
    ``f(t) -> vector`` (slopes by centered finite differences), or a pair
    ``(f, df)`` of callables (exact slopes).
    """
    buf = HistoryBuffer(dim, window, retain_full=False)
    if window == 0:
        knots = np.asarray([t_end])
    else:
        n = max(int(round(window / step)), 1)
        knots = t_end - window + (window / n) * np.arange(n + 1)
        knots[-1] = t_end
    if callable(initial):
        fn, dfn = initial, None
    elif (
        isinstance(initial, tuple)
        and len(initial) == 2
        and callable(initial[0])
        and callable(initial[1])
    ):
        fn, dfn = initial
    else:
        const = np.broadcast_to(np.asarray(initial, dtype=float), (dim,)).copy()
        fn, dfn = (lambda t: const), (lambda t: np.zeros(dim))
    vals = np.asarray([np.broadcast_to(np.asarray(fn(t), dtype=float), (dim,)) for t in knots])
    if dfn is not None:
        slopes = np.asarray(
            [np.broadcast_to(np.asarray(dfn(t), dtype=float), (dim,)) for t in knots]
        )
    else:
        if len(knots) > 2:
            slopes = np.gradient(vals, knots, axis=0, edge_order=2)
        elif len(knots) == 2:
            slopes = np.gradient(vals, knots, axis=0)
        else:
            slopes = np.zeros_like(vals)
    for t, v, m in zip(knots, vals, slopes):
        buf.append(t, v, m)
    return buf


def sup_norm_window(buf, t, r):
    """Max Euclidean norm of the trajectory over [t - r, t].

    The max is taken over the knot grid restricted to the window, plus the
    interpolated values at both window endpoints.
    """
    if isinstance(buf, HistoryView):
        view = buf
        base = buf.buf
    else:
        view = HistoryView(buf)
        base = buf
    tol = base._edge_tol()
    a, b = t - r, t
    if a < base.t_first - tol or b > base.t_last + tol:
        raise OutOfHistoryError(
            f"window [{a}, {b}] not covered by span [{base.t_first}, {base.t_last}]"
        )
    knots = base.knots
    inside = knots[(knots > a + tol) & (knots < b - tol)]
    times = np.concatenate([[max(a, base.t_first)], inside, [min(b, base.t_last)]])
    vals = view.values(times)
    return float(np.max(np.linalg.norm(vals, axis=1))) if len(times) else 0.0
