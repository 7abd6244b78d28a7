"""Declarative scenario configuration (TOML-compatible key = value files)."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .signals import SignalSpec

__all__ = ["ConfigError", "ScenarioConfig", "load_configs", "parse_scenario"]

KINDS = (
    "reactor_observer",
    "reactor_closed_loop",
    "highgain_observer",
    "bound_table",
    "equivalence_check",
)

_SECTION_KEYS = {
    "scenario": {"kind", "out"},
    "schedule": {"kind", "delta", "seed"},
    "grid": {"h", "M", "horizon"},
    "signals": {"xi", "d", "u"},
    "reactor": {"mu", "zeta", "c", "phi", "q_fb", "init", "init_scale",
                "k1", "k2"},
    "highgain": {"n", "pole", "mu", "Ltilde", "r", "theta", "search_max",
                 "example", "init_x", "init_z"},
    "bound_table": {"gamma", "L", "omega_min", "omega_max", "points"},
    "equivalence": {"grids", "horizon"},
}

_SIGNAL_KEYS = {"kind", "value", "amplitude", "omega", "phase", "seed"}


class ConfigError(Exception):
    """Invalid scenario configuration; the message names the offending key."""


def _require_positive(section, key, value):
    if not isinstance(value, (int, float)) or value <= 0:
        raise ConfigError(f"[{section}] {key} must be positive, got {value!r}")
    return float(value)


def _signal_from(section, name, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] {name} must be an inline table")
    unknown = set(raw) - _SIGNAL_KEYS
    if unknown:
        raise ConfigError(f"[{section}] {name}: unknown keys {sorted(unknown)}")
    try:
        return SignalSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {name}: {exc}") from exc


@dataclass
class ScenarioConfig:
    """Fully parsed scenario: kind, schedule/grid/signal specs, and the
    per-kind parameter table."""

    kind: str
    name: str = "scenario"
    out: Optional[str] = None
    schedule_kind: str = "uniform"
    delta: float = 0.05
    seed: int = 0
    h: Optional[float] = None
    big_m: int = 400
    horizon: Optional[float] = None
    signals: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)


def parse_scenario(raw, name="scenario"):
    """Validate one scenario table and build a :class:`ScenarioConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError(f"scenario {name!r} must be a table")
    unknown = set(raw) - set(_SECTION_KEYS)
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)} in scenario {name!r}")
    scen = raw.get("scenario", {})
    for sect in raw:
        extra = set(raw[sect]) - _SECTION_KEYS[sect]
        if extra:
            raise ConfigError(f"[{sect}] unknown key(s) {sorted(extra)}")
    kind = scen.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"[scenario] kind must be one of {KINDS}, got {kind!r}")

    cfg = ScenarioConfig(kind=kind, name=name, out=scen.get("out"))

    sched = raw.get("schedule", {})
    cfg.schedule_kind = sched.get("kind", "uniform")
    if cfg.schedule_kind not in ("uniform", "jittered"):
        raise ConfigError(
            f"[schedule] kind must be 'uniform' or 'jittered', got {cfg.schedule_kind!r}"
        )
    if "delta" in sched:
        cfg.delta = _require_positive("schedule", "delta", sched["delta"])
    seed = sched.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"[schedule] seed must be an integer, got {seed!r}")
    cfg.seed = seed

    grid = raw.get("grid", {})
    if "h" in grid:
        cfg.h = _require_positive("grid", "h", grid["h"])
    if "M" in grid:
        m = grid["M"]
        if not isinstance(m, int) or m < 1:
            raise ConfigError(f"[grid] M must be a positive integer, got {m!r}")
        cfg.big_m = m
    if "horizon" in grid:
        cfg.horizon = _require_positive("grid", "horizon", grid["horizon"])

    for name_, raw_sig in raw.get("signals", {}).items():
        cfg.signals[name_] = _signal_from("signals", name_, raw_sig)

    for sect in ("reactor", "highgain", "bound_table", "equivalence"):
        if sect in raw:
            cfg.params.update(raw[sect])
    return cfg


def load_configs(path, seed_override=None):
    """Parse a config file into named scenarios (one, or a [scenarios.*] batch)."""
    with open(path, "rb") as fh:
        try:
            doc = _toml.load(fh)
        except _toml.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    out = []
    if "scenarios" in doc:
        extra = set(doc) - {"scenarios"}
        if extra:
            raise ConfigError(
                f"batch config mixes [scenarios.*] with top-level section(s) {sorted(extra)}"
            )
        for name, raw in doc["scenarios"].items():
            out.append(parse_scenario(raw, name=name))
    else:
        out.append(parse_scenario(doc))
    if seed_override is not None:
        for cfg in out:
            cfg.seed = seed_override
    return out
