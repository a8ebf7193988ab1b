"""Run configuration: YAML document with strict validation.

Every key of :data:`DEFAULTS` must be present in a config file; unknown keys
are rejected.  Only ``output_dir`` may be overridden from the environment
(``NEWTONPOD_OUTPUT_DIR``).
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .mesh_fem import PdeParams
from .snapshot_gen import SnapshotPipelineConfig
from .theta_stepper import TimeGrid

ENV_OUTPUT_DIR = "NEWTONPOD_OUTPUT_DIR"

DEFAULTS: dict[str, Any] = {
    "grid": {"dimension": 2, "cells_per_side": 32, "mask": None},
    "params": {"a": 0.01, "b": 3.0, "T": 1.0, "K_steps": 65, "theta": 1.0},
    "control_shape": {"sigma": 0.2},
    "steady": {"u_bar": 2.0},
    "pipeline": {
        "cutoff_first": 1e-8,
        "cutoff_nonlin": 1e-8,
        "cutoff_second": 1e-8,
        "cutoff_combined": 1e-8,
        "include_ybar": True,
        "max_nonlin_basis": None,
        "weighting": "coefficient",
    },
    "forward": {"test_control": {"offset": 2.0, "amplitude": 1.0, "kind": "cos"}},
    "verify": {"n_controls": 3, "tolerance": 1e-9},
    "ocp": {
        "gamma": 1e-7,
        "tol": 1e-11,
        "max_iter": 500,
        "reference_control": {"offset": 2.0, "amplitude": 1.5, "kind": "sin"},
        "sweep": [0, 2, 5, 10, 15, 20],
        "include_full_b12": True,
        "relobj": "model",
    },
    "seed": 0,
    "output_dir": "runs/default",
}

_NULLABLE = {"grid.mask", "pipeline.max_nonlin_basis"}


class ConfigError(ValueError):
    pass


def _check_keys(data, ref, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix.rstrip('.') or 'config'}' must be a mapping")
    for key, sub in ref.items():
        name = prefix + key
        if key not in data:
            raise ConfigError(f"missing config key '{name}'")
        if isinstance(sub, dict) and not (name in _NULLABLE and data[key] is None):
            _check_keys(data[key], sub, name + ".")
        elif isinstance(sub, float) and not isinstance(data[key], bool):
            # YAML reads exponent literals such as 1e-8 as strings
            try:
                data[key] = float(data[key])
            except (TypeError, ValueError):
                raise ConfigError(f"config key '{name}' must be a number, got {data[key]!r}") from None
    extra = sorted(set(data) - set(ref))
    if extra:
        raise ConfigError(f"unknown config key '{prefix}{extra[0]}'")


def _control_spec(spec: dict, where: str) -> dict:
    if spec["kind"] not in ("sin", "cos"):
        raise ConfigError(f"{where}.kind must be 'sin' or 'cos', got {spec['kind']!r}")
    for key in ("offset", "amplitude"):
        if not np.isfinite(float(spec[key])):
            raise ConfigError(f"{where}.{key} must be finite")
    return spec


def control_signal(spec: dict, tg: TimeGrid) -> np.ndarray:
    """``offset + amplitude * sin|cos(2 pi t / T)`` at the left interval endpoints."""
    t = tg.times[:-1]
    wave = np.sin if spec["kind"] == "sin" else np.cos
    return float(spec["offset"]) + float(spec["amplitude"]) * wave(2.0 * np.pi * t / tg.T)


@dataclass
class RunConfig:
    raw: dict
    params: PdeParams
    pipeline: SnapshotPipelineConfig
    output_dir: Path

    @property
    def grid(self) -> dict:
        return self.raw["grid"]

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid.from_params(self.params)

    @property
    def ocp(self) -> dict:
        return self.raw["ocp"]

    def to_yaml(self) -> str:
        data = copy.deepcopy(self.raw)
        data["output_dir"] = str(self.output_dir)
        return yaml.safe_dump(data, sort_keys=False)


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def validate(data: dict, env=None) -> RunConfig:
    """Check structure and values; returns the typed configuration."""
    env = os.environ if env is None else env
    _check_keys(data, DEFAULTS)
    g = data["grid"]
    if g["dimension"] not in (1, 2):
        raise ConfigError(f"grid.dimension must be 1 or 2, got {g['dimension']}")
    if not isinstance(g["cells_per_side"], int) or g["cells_per_side"] < 2:
        raise ConfigError("grid.cells_per_side must be an integer >= 2")
    if g["mask"] is not None and g["dimension"] != 2:
        raise ConfigError("grid.mask is only supported in 2-D")
    for key in ("a", "b", "T"):
        if not float(data["params"][key]) > 0:
            raise ConfigError(f"params.{key} must be positive, got {data['params'][key]}")
    try:
        params = PdeParams(**data["params"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params: {exc}") from exc
    if not float(data["control_shape"]["sigma"]) > 0:
        raise ConfigError("control_shape.sigma must be positive")
    if not np.isfinite(float(data["steady"]["u_bar"])):
        raise ConfigError("steady.u_bar must be finite")
    try:
        pipeline = SnapshotPipelineConfig(**data["pipeline"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pipeline: {exc}") from exc
    _control_spec(data["forward"]["test_control"], "forward.test_control")
    v = data["verify"]
    if not isinstance(v["n_controls"], int) or v["n_controls"] < 1:
        raise ConfigError("verify.n_controls must be a positive integer")
    if not float(v["tolerance"]) > 0:
        raise ConfigError("verify.tolerance must be positive")
    o = data["ocp"]
    _control_spec(o["reference_control"], "ocp.reference_control")
    if not float(o["gamma"]) >= 0:
        raise ConfigError("ocp.gamma must be non-negative")
    if not float(o["tol"]) > 0:
        raise ConfigError("ocp.tol must be positive")
    if not isinstance(o["max_iter"], int) or o["max_iter"] < 1:
        raise ConfigError("ocp.max_iter must be a positive integer")
    if not isinstance(o["sweep"], list) or any(not isinstance(j, int) or j < 0 for j in o["sweep"]):
        raise ConfigError("ocp.sweep must be a list of non-negative integers")
    if o["relobj"] not in ("fem", "model"):
        raise ConfigError("ocp.relobj must be 'fem' or 'model'")
    out = env.get(ENV_OUTPUT_DIR) or data["output_dir"]
    return RunConfig(data, params, pipeline, Path(out))


def load_config(path, env=None) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return validate(data if data is not None else {}, env)
