"""Time-indexed simulation records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SimTrace"]


@dataclass
class SimTrace:
    """Per-time records of a plant/observer run.

    All channels share the ``times`` grid.  Rows at sampling instants are
    duplicated: the first row carries the predictor's left limit, the second
    its reset value.  ``aux`` holds named scalar channels (Lyapunov values,
    envelopes, field errors, ...).
    """

    times: np.ndarray
    plant_state: np.ndarray  # (N, n)
    observer_state: np.ndarray  # (N, l)
    predictor_w: np.ndarray  # (N, k)
    output_y: np.ndarray  # (N, k)
    err_sup: np.ndarray  # (N,)
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        for name in ("plant_state", "observer_state", "predictor_w", "output_y"):
            arr = getattr(self, name)
            if arr.ndim == 1:
                setattr(self, name, arr.reshape(-1, 1))
            if len(getattr(self, name)) != n:
                raise ValueError(f"channel {name} length != time grid length")
        if len(self.err_sup) != n:
            raise ValueError("err_sup length != time grid length")
        if np.any(self.err_sup < 0):
            raise ValueError("err_sup must be nonnegative")
        for name, ch in self.aux.items():
            if len(ch) != n:
                raise ValueError(f"aux channel {name!r} length != time grid length")

    def __len__(self):
        return len(self.times)

    def channel(self, name):
        """Scalar channel by name: 'err_sup', an aux key, or 'w'/'y' (first col)."""
        if name == "err_sup":
            return self.err_sup
        if name in self.aux:
            return self.aux[name]
        if name == "w":
            return self.predictor_w[:, 0]
        if name == "y":
            return self.output_y[:, 0]
        raise KeyError(f"unknown channel {name!r}")
