"""Sampling schedules and exogenous signal specifications.

Random signals are counter-based: the value at time ``t`` is a hash of
``(seed, bits(t))``, so it depends only on the signal spec and the query time, never
on evaluation order.  That keeps traces bitwise reproducible regardless of how
the integrator interleaves lookups.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SamplingSchedule",
    "SignalSpec",
    "uniform_schedule",
    "jittered_schedule",
    "validate_schedule",
]


@dataclass(frozen=True)
class SamplingSchedule:
    """Strictly increasing sample instants starting at 0 with gaps <= diameter."""

    instants: np.ndarray
    diameter: float

    def __post_init__(self):
        object.__setattr__(
            self, "instants", np.asarray(self.instants, dtype=float)
        )

    def __len__(self):
        return len(self.instants)

    @property
    def horizon(self):
        return float(self.instants[-1])

    def validate(self):
        return validate_schedule(self, self.diameter)


def uniform_schedule(delta, horizon):
    """Instants {0, delta, 2*delta, ...} up to the first instant >= horizon."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    n = int(np.ceil(horizon / delta - 1e-12))
    instants = delta * np.arange(n + 1)
    if instants[-1] < horizon:  # roundoff guard
        instants = np.append(instants, delta * (n + 1))
    return SamplingSchedule(instants, delta)


def jittered_schedule(delta, horizon, seed):
    """Gaps drawn i.i.d. uniform on [delta/2, delta]; deterministic per seed."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    rng = np.random.default_rng(seed)
    instants = [0.0]
    while instants[-1] < horizon:
        instants.append(instants[-1] + rng.uniform(0.5 * delta, delta))
    sched = SamplingSchedule(np.asarray(instants), delta)
    assert sched.validate()
    return sched


def validate_schedule(s, delta):
    """True iff tau_0 = 0, instants strictly increasing, all gaps <= delta."""
    instants = np.asarray(s.instants if isinstance(s, SamplingSchedule) else s, dtype=float)
    if len(instants) == 0 or instants[0] != 0.0:
        return False
    gaps = np.diff(instants)
    if len(gaps) == 0:
        return True
    # relative slack absorbs grid roundoff in long uniform schedules
    return bool(np.all(gaps > 0) and np.all(gaps <= delta * (1 + 1e-9)))


# -- signal specs ---------------------------------------------------------


def _mix64(v):
    # SplitMix64 finalizer; uint64 in, uint64 out
    v = np.uint64(v)
    with np.errstate(over="ignore"):
        v = (v ^ (v >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        v = (v ^ (v >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        v = v ^ (v >> np.uint64(31))
    return v


def _hash_unit(seed, t):
    """Deterministic uniform [0, 1) from (seed, float bits of t)."""
    bits = np.float64(t).view(np.uint64)
    with np.errstate(over="ignore"):
        v = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _mix64(bits))
    return float(v) / float(2**64)


@dataclass(frozen=True)
class SignalSpec:
    """Declarative scalar signal: zero, constant, sinusoid or seeded noise.

    kind: 'zero' | 'constant' | 'sinusoid' | 'uniform_random'
    constant uses ``value``; sinusoid uses ``amplitude``, ``omega``, ``phase``;
    uniform_random draws from [-amplitude, amplitude] via the counter-based
    hash, keyed by ``seed``.
    """

    kind: str = "zero"
    value: float = 0.0
    amplitude: float = 0.0
    omega: float = 0.0
    phase: float = 0.0
    seed: int = 0

    _KINDS = ("zero", "constant", "sinusoid", "uniform_random")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}")

    def __call__(self, t):
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.value
        if self.kind == "sinusoid":
            return self.amplitude * np.sin(self.omega * t + self.phase)
        u = _hash_unit(self.seed, t)
        return self.amplitude * (2.0 * u - 1.0)
