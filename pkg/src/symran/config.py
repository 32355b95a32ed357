"""Run configuration: one JSON file per run, schema-validated and hashed.

Unknown keys are rejected at every nesting level so typos cannot
silently fall back to defaults. The config hash is the sha256 of the
canonical (sorted-key, whitespace-free) JSON of the merged config and
versions every artifact a run produces.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass

import jsonschema

from .errors import ConfigError
from .kpm import TASK_SLICING, TASKS

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["task", "output_dir"],
    "properties": {
        "seed": _INT,
        "task": {"enum": list(TASKS)},
        "output_dir": {"type": "string"},
        "env": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_prb": _POS_INT,
                "ue_count_range": {
                    "type": "array", "items": _INT,
                    "minItems": 2, "maxItems": 2,
                },
                "kpm_noise_frac": _NUM,
                "roster_change_prob": _NUM,
                "expose_true_concepts": {"type": "boolean"},
                "reward": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "targets": {
                            "type": "object",
                            "additionalProperties": False,
                            "patternProperties": {
                                "^(eMBB|URLLC|mMTC|ue)$": {
                                    "type": "array", "items": _NUM,
                                    "minItems": 2, "maxItems": 2,
                                },
                            },
                        },
                        "beta1": _NUM, "beta2": _NUM,
                        "beta3": _NUM, "beta4": _NUM,
                        "gamma": _NUM, "horizon": _POS_INT,
                    },
                },
            },
        },
        "concepts": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "entity_selector", "kpm_indices"],
                "properties": {
                    "name": {"type": "string"},
                    "entity_selector": {"type": "string"},
                    "kpm_indices": {"type": "array", "items": _INT, "minItems": 1},
                },
            },
        },
        "teacher": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["scripted", "neural"]},
                "sigma_z": _NUM,
                "trace_steps": _POS_INT,
                "buffer_capacity": _POS_INT,
                "bc": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "hidden": {"type": "array", "items": _POS_INT},
                        "train_steps": _POS_INT,
                        "batch": _POS_INT,
                        "lr": _NUM,
                        "holdout_frac": _NUM,
                    },
                },
            },
        },
        "conceptizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_h": _POS_INT, "hidden": _POS_INT, "batch": _POS_INT,
                "max_epochs": _POS_INT, "patience": _POS_INT, "lr": _NUM,
            },
        },
        "audit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n_ig": {"type": "integer", "minimum": 16},
                           "probes": _POS_INT},
        },
        "dsr": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_max": {"type": "integer", "minimum": 2},
                "batch": {"type": "integer", "minimum": 10},
                "iterations": _POS_INT,
                "risk_quantile": _NUM,
                "const_fit_steps": _POS_INT,
                "fit_subsample": _POS_INT,
                "entropy_weight": _NUM,
                "hidden": _POS_INT,
                "lr": _NUM,
                "max_evaluations": _POS_INT,
                "target_j": _NUM,
            },
        },
        "logic": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kappa": _NUM,
                "prune_threshold": _NUM,
                "top_triples_per_head": _POS_INT,
                "steps": _POS_INT,
                "lr": _NUM,
                "comparison_pairs": {
                    "type": "array",
                    "items": {"type": "array", "items": _INT,
                              "minItems": 2, "maxItems": 2},
                },
            },
        },
        "shield": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_prime": _POS_INT,
                "percentile": _NUM,
                "a_min": _NUM,
                "a_max": _NUM,
                "min_dwell": _POS_INT,
                "bank_capacity": _POS_INT,
                "risk": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "hidden": {"type": "array", "items": _POS_INT,
                                   "minItems": 2, "maxItems": 2},
                        "steps": _POS_INT,
                        "lr": _NUM,
                    },
                },
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seeds": {"type": "array", "items": _INT, "minItems": 1},
                "steps": _POS_INT,
                "latency_inputs": _POS_INT,
                "latency_reps": _POS_INT,
                "ablations": {
                    "type": "array",
                    "items": {"enum": [
                        "no_conceptizer", "no_masking", "linear_head",
                        "mlp_head", "no_correction", "no_retrieval", "no_shield",
                    ]},
                },
            },
        },
    },
}


def default_config(task: str = TASK_SLICING, output_dir: str = "out") -> dict:
    return {
        "seed": 0,
        "task": task,
        "output_dir": output_dir,
        "env": {
            "n_prb": 50,
            "kpm_noise_frac": 0.02,
            "expose_true_concepts": True,
            "reward": {"beta1": 1.0, "beta2": 1.0, "beta3": 1.0, "beta4": 1.0,
                       "gamma": 0.99, "horizon": 200},
        },
        "teacher": {
            "kind": "neural",
            "sigma_z": 0.02,
            "trace_steps": 20000,
            "buffer_capacity": 50000,
            "bc": {"hidden": [128, 128], "train_steps": 10000, "batch": 256,
                   "lr": 1e-3, "holdout_frac": 0.1},
        },
        "conceptizer": {"d_h": 8, "hidden": 16, "batch": 256, "max_epochs": 60,
                        "patience": 20, "lr": 3e-3},
        "audit": {"n_ig": 256, "probes": 50},
        "dsr": {"d_max": 6, "batch": 500, "iterations": 400,
                "risk_quantile": 0.05, "const_fit_steps": 20,
                "fit_subsample": 256, "entropy_weight": 0.01, "hidden": 32,
                "lr": 0.005, "max_evaluations": 200000, "target_j": 0.999},
        "logic": {"kappa": 2.0, "prune_threshold": 0.1,
                  "top_triples_per_head": 50, "steps": 1500, "lr": 0.05,
                  "comparison_pairs": [[1, 0]]},
        "shield": {"t_prime": 10, "percentile": 95.0, "a_min": 0.05,
                   "a_max": 0.8, "min_dwell": 2, "bank_capacity": 5000,
                   "risk": {"hidden": [16, 16], "steps": 2000, "lr": 3e-3}},
        "eval": {"seeds": [11, 12, 13, 14, 15], "steps": 2000,
                 "latency_inputs": 100000, "latency_reps": 5, "ablations": []},
    }


def validate_config(raw: dict) -> dict:
    """Validate against the schema and merge over the task defaults."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config schema violation at {path}: {e.message}") from e
    merged = default_config(raw["task"], raw["output_dir"])
    _deep_merge(merged, raw)
    return merged


def _deep_merge(base: dict, override: dict) -> None:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = copy.deepcopy(value)


def canonical_hash(config: dict) -> str:
    """Key-order-insensitive hash of the semantically meaningful content."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunConfig:
    raw: dict
    config_hash: str

    @property
    def seed(self) -> int:
        return self.raw.get("seed", 0)

    @property
    def task(self) -> str:
        return self.raw["task"]

    @property
    def output_dir(self) -> str:
        return self.raw["output_dir"]

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    merged = validate_config(raw)
    env_seed = os.environ.get("SYMRAN_SEED")
    if env_seed is not None:
        try:
            merged["seed"] = int(env_seed)
        except ValueError as e:
            raise ConfigError(f"SYMRAN_SEED is not an integer: {env_seed!r}") from e
    return RunConfig(raw=merged, config_hash=canonical_hash(merged))


def config_from_dict(raw: dict) -> RunConfig:
    merged = validate_config(raw)
    return RunConfig(raw=merged, config_hash=canonical_hash(merged))
