"""YAML configuration with a published JSON schema.

Unknown keys are rejected everywhere.  Paths may be overridden from the
environment (and only paths):

    FACEFACTORY_DIRECTION_STORE   direction_store
    FACEFACTORY_OUTPUT_ROOT       output_root
    FACEFACTORY_WEIGHTS           backend.weights
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import jsonschema
import yaml

from .factory import DEFAULT_COEFF_MAX


class ConfigError(ValueError):
    pass


_NUMBER_MAP = {"type": "object", "additionalProperties": {"type": "number"}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "facefactory configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "backend": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"type": "string"},
                "size": {"type": "integer", "minimum": 8},
                "weights": {"type": ["string", "null"]},
                "device": {"type": "string"},
            },
        },
        "annotator": {"type": "string"},
        "embedder": {"type": "string"},
        "detector": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"name": {"enum": ["toy", "dlib"]}, "predictor": {"type": ["string", "null"]}},
        },
        "direction_store": {"type": "string"},
        "output_root": {"type": "string"},
        "dataset_seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "coeff_max": _NUMBER_MAP,
        "thresholds": _NUMBER_MAP,
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["preset61"]},
                "azimuth_steps": {"type": "integer", "minimum": 1},
                "elevations": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "ambient": {"type": "number", "minimum": 0},
                "intensity": {"type": "number", "minimum": 0},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "l2": {"type": "number", "minimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "holdout_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "split_seed": {"type": "integer", "minimum": 0},
            },
        },
        "inversion": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_iters": {"type": "integer", "minimum": 0},
                "step_size": {"type": "number", "exclusiveMinimum": 0},
                "init": {"enum": ["w_avg", "random"]},
                "regularizer_weight": {"type": "number", "minimum": 0},
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "probe_step": {"type": "number", "exclusiveMinimum": 0},
                "blur_schedule": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "restarts": {"type": "integer", "minimum": 0},
                "restart_mse": {"type": "number", "minimum": 0},
            },
        },
        "harness": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "train_size": {"type": "integer", "minimum": 2},
                "test_size": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

DEFAULTS = {
    "backend": {"name": "toy", "size": 256, "weights": None, "device": "cpu"},
    "annotator": "toy",
    "embedder": "pixels",
    "detector": {"name": "toy", "predictor": None},
    "direction_store": "directions",
    "output_root": "dataset",
    "dataset_seed": 0,
    "workers": 1,
    "coeff_max": dict(DEFAULT_COEFF_MAX),
    "thresholds": {},
    "sweep": {"preset": "preset61"},
    "solver": {"l2": 1e-3, "max_iter": 1000, "tol": 1e-8, "holdout_fraction": 0.2, "split_seed": 0},
    "inversion": {},
    "harness": {"epochs": 30, "train_size": 1600, "test_size": 400, "seed": 0, "lr": 0.1},
}

ENV_PATHS = {
    "FACEFACTORY_DIRECTION_STORE": ("direction_store",),
    "FACEFACTORY_OUTPUT_ROOT": ("output_root",),
    "FACEFACTORY_WEIGHTS": ("backend", "weights"),
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def load_config(path=None, env=None) -> dict:
    """Defaults, then the YAML file (if any), then path overrides from ``env``."""
    env = os.environ if env is None else env
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
    validate(raw)
    cfg = _merge(DEFAULTS, raw)
    for var, keys in ENV_PATHS.items():
        if env.get(var):
            node = cfg
            for k in keys[:-1]:
                node = node[k]
            node[keys[-1]] = env[var]
    validate(cfg)
    return cfg
