"""Flat ``key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Model parameters are given as plain keys (``a = 4``) and must be accepted by
the chosen registry model.  Lists are comma separated.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .models import REGISTRY

EXPERIMENTS = (
    "exactness",
    "gap-check",
    "poincare-check",
    "poisson-check",
    "error-vs-bound",
    "scaling",
    "stationarity",
    "growth-in-T",
    "random-clock-compare",
)

MODEL_PARAMS = ("a", "gamma", "eps", "delta", "u1", "u2", "period")


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def _float(key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}", key) from None


def _int(key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}", key) from None


def _bool(key, raw):
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {raw!r}", key)


def _floats(key, raw):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"{key}: empty list", key)
    return tuple(_float(key, p) for p in parts)


def _str(key, raw):
    return raw.strip()


# key -> (parser, positive-required)
KEYS = {
    "experiment": (_str, False),
    "model": (_str, False),
    "output": (_str, False),
    "seed": (_int, False),
    "dt": (_float, True),
    "T": (_float, False),
    "n_paths": (_int, True),
    "n_samples": (_int, True),
    "effective": (_str, False),
    "bins": (_int, True),
    "z_min": (_float, False),
    "z_max": (_float, False),
    "map_index": (_int, False),
    "map_T": (_floats, False),
    "map_tau": (_float, False),
    "grid_R": (_float, True),
    "grid_nodes": (_int, True),
    "z_list": (_floats, False),
    "z": (_float, False),
    "eps_list": (_floats, True),
    "T_list": (_floats, True),
    "dt_check": (_bool, False),
    "substeps": (_int, True),
    "mcmc_burn_in": (_int, False),
    "mcmc_thinning": (_int, True),
}


@dataclass
class ExperimentConfig:
    experiment: str
    model: str
    params: dict = field(default_factory=dict)
    output: Optional[str] = None
    seed: int = 0
    dt: float = 1e-3
    T: float = 1.0
    n_paths: int = 1000
    n_samples: int = 1_000_000
    effective: str = "analytic"
    bins: int = 50
    z_min: Optional[float] = None
    z_max: Optional[float] = None
    map_index: int = 0
    map_T: Optional[tuple] = None
    map_tau: float = 0.0
    grid_R: Optional[float] = None
    grid_nodes: int = 2001
    z_list: Optional[tuple] = None
    z: float = 0.0
    eps_list: tuple = (0.2, 0.1, 0.05, 0.025)
    T_list: tuple = (1.0, 2.0, 4.0)
    dt_check: bool = False
    substeps: int = 1
    mcmc_burn_in: int = 1_000_000
    mcmc_thinning: int = 100

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment: unknown experiment {self.experiment!r}; expected one of {', '.join(EXPERIMENTS)}",
                "experiment",
            )
        if self.model not in REGISTRY:
            raise ConfigError(
                f"model: unknown model {self.model!r}; expected one of {', '.join(sorted(REGISTRY))}",
                "model",
            )
        accepted = inspect.signature(REGISTRY[self.model]).parameters
        for key in self.params:
            if key not in accepted:
                raise ConfigError(f"{key}: not a parameter of model {self.model}", key)
        if self.effective not in ("analytic", "estimated"):
            raise ConfigError("effective: expected 'analytic' or 'estimated'", "effective")
        if self.T < 0:
            raise ConfigError("T: must be non-negative", "T")
        if (self.z_min is None) != (self.z_max is None):
            raise ConfigError("z_min and z_max must be given together", "z_min" if self.z_min is None else "z_max")
        if self.z_min is not None and not self.z_min < self.z_max:
            raise ConfigError("z_max: must exceed z_min", "z_max")
        return self


def parse_config(text: str, seed: Optional[int] = None) -> ExperimentConfig:
    """Parse configuration text; ``seed`` overrides the file's seed."""
    values = {}
    params = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        if key in values or key in params:
            raise ConfigError(f"{key}: duplicate key", key)
        if key in MODEL_PARAMS:
            params[key] = _float(key, raw)
            continue
        if key not in KEYS:
            raise ConfigError(f"{key}: unknown configuration key", key)
        parser, positive = KEYS[key]
        val = parser(key, raw)
        if positive:
            vals = val if isinstance(val, tuple) else (val,)
            if any(v <= 0 for v in vals):
                raise ConfigError(f"{key}: must be positive", key)
        values[key] = val
    for required in ("experiment", "model"):
        if required not in values:
            raise ConfigError(f"{required}: missing required key", required)
    if seed is not None:
        values["seed"] = seed
    return ExperimentConfig(params=params, **values).validate()


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, seed)
