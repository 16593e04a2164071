"""
Configuration loader for experiment runs.

A config file is JSON. User values are deep-merged over DEFAULT_CONFIG and the
result is validated into ExperimentConfig; unknown keys are rejected.
"""
import copy
import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigError
from model import ModelParams
from particles import Scheme, SimConfig

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"


class ExperimentName(str, Enum):
    MOMENT_DECAY = "moment_decay"
    CHAOS_SCALING = "chaos_scaling"
    UNIFORM_IN_TIME = "uniform_in_time"
    WJ_AUDIT = "wj_audit"
    PROP23_AUDIT = "prop23_audit"
    CONSTANTS_FRONTIER = "constants_frontier"
    TRACE_AUDIT = "trace_audit"
    SUPERADDITIVITY_AUDIT = "superadditivity_audit"


# Default configuration
DEFAULT_CONFIG = {
    "experiment": "trace_audit",
    "output_dir": "output",
    "eta": 1.0,
    "workers": None,
    "model": {"a": 0.1, "eps": 0.01, "dim": 1},
    "sim": {"dt": 1e-3, "seed": 0, "n_replicas": 64, "scheme": "euler_maruyama", "record_every": 100},
    "grid": {"half_width": None, "n_cells": 512, "dt": None, "damping": 0.5, "tol": 1e-10, "max_iter": 10000},
    "moment_decay": {
        "m2_0": 4.0,
        "t_end": 2.0,
        "deltas": [0.25, 0.5, 1.0],
        "margin": 0.05,
        "snapshot_every": 100,
        "free_energy_steps": 10000,
        "free_energy_slack": 1e-8,
        "perturbations": 20,
        "residual_tol": 1e-8,
        "moment_margin": 1e-3,
        "drift_t_end": 10.0,
        "stationary_n_cells": 2048,
        "drift_tol": 1e-6,
        "particles": 64,
        "particle_sigma": 3.0,
    },
    "chaos": {
        "n_values": [16, 64, 256],
        "t_end": 5.0,
        "sample_every": 0.1,
        "init_var": 0.5,
        "ratio_min": 2.0,
        "ratio_max": 8.0,
        "growth_factor": 1.5,
    },
    "wj": {"perturbations": 10, "strength": 0.3, "margin": 0.02, "heat_floor": -1e-12},
    "prop23": {
        "n": 2,
        "t_end": 2.0,
        "sample_every": 0.1,
        "init_var": 1.0,
        "initial": "iid",
        "copula_rho": 0.5,
        "fn_samples": 1000000,
        "fn_eps": [0.05, 0.1],
        "fn_n": [2, 8, 64],
        "sigma": 3.0,
        "plan_cap": 1000000,
    },
    "frontier": {"a_min": 1e-4, "a_max": 0.2, "points": 40, "eps": 0.0},
    "trace": {"trials": 1000, "d_max": 3, "n_max": 4, "equality_trials": 200, "tol": 1e-9},
    "superadditivity": {
        "pairs": 200,
        "n_max": 4,
        "atoms_max": 5,
        "tensor_pairs": 50,
        "tensor_n_max": 3,
        "tensor_atoms_max": 3,
        "tol": 1e-9,
    },
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    a: float = Field(gt=0)
    eps: float = Field(ge=0)
    dim: int = Field(ge=1, le=3)

    def params(self) -> ModelParams:
        return ModelParams(a=self.a, eps=self.eps, dim=self.dim)


class SimSection(_Section):
    dt: float = Field(gt=0, le=0.1)
    seed: int = Field(ge=0, lt=2**64)
    n_replicas: int = Field(ge=1)
    scheme: Scheme = Scheme.EULER_MARUYAMA
    record_every: int = Field(ge=1)

    def sim_config(self) -> SimConfig:
        return SimConfig(
            dt=self.dt, seed=self.seed, n_replicas=self.n_replicas,
            scheme=self.scheme, record_every=self.record_every,
        )


class GridSection(_Section):
    half_width: Optional[float] = Field(default=None, gt=0)
    n_cells: int = Field(ge=16)
    dt: Optional[float] = Field(default=None, gt=0)
    damping: float = Field(gt=0, le=1)
    tol: float = Field(gt=0)
    max_iter: int = Field(ge=1)


class MomentDecaySection(_Section):
    m2_0: float = Field(gt=0)
    t_end: float = Field(gt=0)
    deltas: List[float]
    margin: float = Field(ge=0)
    snapshot_every: int = Field(ge=1)
    free_energy_steps: int = Field(ge=1)
    free_energy_slack: float = Field(ge=0)
    perturbations: int = Field(ge=0)
    residual_tol: float = Field(gt=0)
    moment_margin: float = Field(ge=0)
    drift_t_end: float = Field(ge=0)
    stationary_n_cells: int = Field(ge=16)
    drift_tol: float = Field(gt=0)
    particles: int = Field(ge=1)
    particle_sigma: float = Field(gt=0)

    @field_validator("deltas")
    @classmethod
    def positive_deltas(cls, v: List[float]) -> List[float]:
        if not v or any(d <= 0 for d in v):
            raise ValueError("deltas must be a nonempty list of positive numbers")
        return v


class ChaosSection(_Section):
    n_values: List[int]
    t_end: float = Field(gt=0)
    sample_every: float = Field(gt=0)
    init_var: float = Field(gt=0)
    ratio_min: float = Field(gt=0)
    ratio_max: float = Field(gt=0)
    growth_factor: float = Field(ge=1)

    @field_validator("n_values")
    @classmethod
    def increasing_sizes(cls, v: List[int]) -> List[int]:
        if len(v) < 2 or any(n < 1 for n in v) or sorted(set(v)) != v:
            raise ValueError("n_values must hold at least two increasing positive sizes")
        return v


class WjSection(_Section):
    perturbations: int = Field(ge=1)
    strength: float = Field(gt=0)
    margin: float = Field(ge=0, lt=1)
    heat_floor: float = Field(le=0)


class Prop23Section(_Section):
    n: int = Field(ge=2, le=3)
    t_end: float = Field(gt=0)
    sample_every: float = Field(gt=0)
    init_var: float = Field(gt=0)
    initial: Literal["iid", "copula"]
    copula_rho: float = Field(ge=0, lt=1)
    fn_samples: int = Field(ge=100)
    fn_eps: List[float]
    fn_n: List[int]
    sigma: float = Field(gt=0)
    plan_cap: int = Field(ge=1)


class FrontierSection(_Section):
    a_min: float = Field(gt=0)
    a_max: float = Field(gt=0)
    points: int = Field(ge=2)
    eps: float = Field(ge=0)


class TraceSection(_Section):
    trials: int = Field(ge=1)
    d_max: int = Field(ge=1)
    n_max: int = Field(ge=1)
    equality_trials: int = Field(ge=0)
    tol: float = Field(gt=0)


class SuperadditivitySection(_Section):
    pairs: int = Field(ge=1)
    n_max: int = Field(ge=2, le=6)
    atoms_max: int = Field(ge=1)
    tensor_pairs: int = Field(ge=1)
    tensor_n_max: int = Field(ge=1, le=4)
    tensor_atoms_max: int = Field(ge=2)
    tol: float = Field(gt=0)


class ExperimentConfig(_Section):
    experiment: ExperimentName
    output_dir: str
    eta: float = Field(gt=0)
    workers: Optional[int] = Field(default=None, ge=1)
    model: ModelSection
    sim: SimSection
    grid: GridSection
    moment_decay: MomentDecaySection
    chaos: ChaosSection
    wj: WjSection
    prop23: Prop23Section
    frontier: FrontierSection
    trace: TraceSection
    superadditivity: SuperadditivitySection


def deep_merge(base: Dict, override: Dict) -> Dict:
    """Recursively merge override into a copy of base; nested dicts merge, everything else replaces."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _format_validation_error(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        key = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"{key}: {err['msg']}")
    return "; ".join(lines)


def validate_config(raw: Dict) -> ExperimentConfig:
    """Merge raw over the defaults and validate. Raises ConfigError naming the offending keys."""
    try:
        return ExperimentConfig.model_validate(deep_merge(DEFAULT_CONFIG, raw))
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from e


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """
    Load configuration from a JSON file.

    Without a path the local config.json is used, and a missing or unreadable
    default file falls back to DEFAULT_CONFIG with a warning. An explicit path
    must exist and parse; errors carry line and column.
    """
    explicit = path is not None
    path = path or CONFIG_FILE
    if not os.path.exists(path):
        if explicit:
            raise ConfigError(f"config file {path} not found")
        logger.warning(f"{path} not found, using defaults")
        return validate_config({})

    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        if not explicit:
            logger.warning(f"Failed to load {path}: {e}, using defaults")
            return validate_config({})
        raise ConfigError(f"{path}: {e.msg}", line=e.lineno, column=e.colno) from e
    except IOError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e

    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    try:
        return validate_config(raw)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e


def save_config(config: ExperimentConfig, path: Path):
    """Write the effective (merged) configuration next to the run artifacts."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")
