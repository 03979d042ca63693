"""Experiment configuration: YAML documents validated against a JSON schema.

Every epsilon carries an explicit unit tag. ``per255`` values are divided by
255 when the config is parsed; ``unit`` values are used as they are. Configs
are canonicalized (defaults filled, keys sorted) before fingerprinting, so two
documents that describe the same experiment hash identically.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .data import CORRUPTIONS

DATA_ENV = "ADVTUNE_DATA"
PRESETS = ("mnist-paper", "cifar10-paper")
UNITS = ("per255", "unit")


class ConfigError(ValueError):
    """Schema violation or malformed override; ``errors`` lists field-level messages."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(errors))
        self.errors = errors


# --------------------------------------------------------------------------- schema

_EPS = {
    "type": "object",
    "required": ["value", "unit"],
    "additionalProperties": False,
    "properties": {"value": {"type": "number", "minimum": 0}, "unit": {"enum": list(UNITS)}},
}
_EPS_LIST = {
    "type": "object",
    "required": ["values", "unit"],
    "additionalProperties": False,
    "properties": {
        "values": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "unit": {"enum": list(UNITS)},
    },
}
_OPT = {
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "momentum": {"type": "number", "minimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr_milestones": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
    "lr_gamma": {"type": "number", "exclusiveMinimum": 0},
    "max_steps": {"type": ["integer", "null"], "minimum": 1},
}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "advtune experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "model", "attack"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "deterministic": {"type": "boolean"},
        "output_dir": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": ["mnist", "cifar10"]},
                "root": {"type": ["string", "null"]},
                "train_limit": {"type": ["integer", "null"], "minimum": 1},
                "test_limit": {"type": ["integer", "null"], "minimum": 1},
                "augment": {"type": "boolean"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["architecture"],
            "properties": {
                "architecture": {"enum": ["small_cnn", "resnet18", "resnet34", "resnet50", "resnet101", "linear"]},
                "dtype": {"enum": ["float32", "float64"]},
                "normalize": {"type": "boolean"},
            },
        },
        "standard": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"epochs": {"type": "integer", "minimum": 0}, **_OPT},
        },
        "robust": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                **_OPT,
                "epochs": {"type": ["integer", "null"], "minimum": 0},
                "solver": {"enum": ["replay", "kkt"]},
                "eta_lambda": {"type": "number", "minimum": 0},
                "replay": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2},
                "replay_mode": {"enum": ["combined", "alternating"]},
                "schedule": {"oneOf": [{"type": "null"}, {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["start", "end", "decay_epochs"],
                    "properties": {
                        "start": _EPS,
                        "end": _EPS,
                        "decay_epochs": {"type": "integer", "minimum": 0},
                        "tail_epochs": {"type": "integer", "minimum": 0},
                    },
                }]},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "epsilon"],
            "properties": {
                "kind": {"enum": ["dra", "pgd", "fgsm"]},
                "epsilon": _EPS,
                "iterations": {"type": "integer", "minimum": 1},
                "p": {"type": "number", "minimum": 0, "maximum": 1},
                "step_size": {"oneOf": [{"type": "null"}, _EPS]},
                "random_start": {"type": "boolean"},
                "l1_scale": {"enum": ["total", "per_pixel"]},
                "mask_rule": {"enum": ["gradient", "literal"]},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eps_list": _EPS_LIST,
                "iterations": {"type": "integer", "minimum": 1},
                "step_fraction": {"type": "number", "exclusiveMinimum": 0},
                "random_start": {"type": "boolean"},
                "robust_every": {"type": "integer", "minimum": 1},
                "train_eps": {"oneOf": [{"type": "null"}, _EPS]},
                "corruptions": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "enabled": {"type": "boolean"},
                        "root": {"type": ["string", "null"]},
                        "names": {"type": "array", "items": {"enum": list(CORRUPTIONS)}},
                        "severities": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 5}},
                    },
                },
                "ablation": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "p_list": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                        "epsilon": {"oneOf": [{"type": "null"}, _EPS]},
                        "iterations": {"type": "integer", "minimum": 1},
                        "limit": {"type": ["integer", "null"], "minimum": 1},
                    },
                },
                "r_sep": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "metric": {"enum": ["l_inf", "l2"]},
                        "subsample": {"type": ["integer", "null"], "minimum": 2},
                    },
                },
                "calibrate": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "pgd_grid": _EPS_LIST,
                        "dra_grid": _EPS_LIST,
                        "tolerance": {"type": "number", "minimum": 0},
                        "limit": {"type": ["integer", "null"], "minimum": 1},
                    },
                },
            },
        },
    },
}

DEFAULTS: dict = {
    "name": "experiment",
    "seed": 0,
    "deterministic": True,
    "output_dir": "runs/experiment",
    "dataset": {"root": None, "train_limit": None, "test_limit": None, "augment": False},
    "model": {"dtype": "float32", "normalize": True},
    "standard": {
        "epochs": 10, "lr": 0.05, "momentum": 0.9, "weight_decay": 2e-4, "batch_size": 128,
        "lr_milestones": [0.5, 0.75], "lr_gamma": 0.1, "max_steps": None,
    },
    "robust": {
        "lr": 0.01, "momentum": 0.9, "weight_decay": 2e-4, "batch_size": 128,
        "lr_milestones": [0.5, 0.75], "lr_gamma": 0.1, "max_steps": None,
        "epochs": None, "solver": "replay", "eta_lambda": 0.1, "replay": [1.0, 1.0], "replay_mode": "combined",
        "schedule": None,
    },
    "attack": {
        "iterations": 20, "p": 1.0, "step_size": None, "random_start": True,
        "l1_scale": "total", "mask_rule": "gradient",
    },
    "eval": {
        "eps_list": {"values": [0.1, 0.2, 0.3], "unit": "unit"},
        "iterations": 20, "step_fraction": 0.05, "random_start": True, "robust_every": 5,
        "train_eps": None,
        "corruptions": {"enabled": False, "root": None,
                        "names": list(CORRUPTIONS),
                        "severities": [1, 2, 3, 4, 5]},
        "ablation": {"p_list": [0.0, 1 / 6, 1 / 3, 0.5, 1.0], "epsilon": None, "iterations": 20, "limit": 1000},
        "r_sep": {"metric": "l_inf", "subsample": 2000},
        "calibrate": {"pgd_grid": {"values": [0.05, 0.1, 0.2, 0.3], "unit": "unit"},
                      "dra_grid": {"values": [1, 2, 5, 10, 20], "unit": "unit"},
                      "tolerance": 0.0, "limit": 500},
    },
}


# --------------------------------------------------------------------------- helpers


def to_unit(eps: dict | None) -> float | None:
    """Absolute [0, 1]-scale value of a tagged epsilon."""
    if eps is None:
        return None
    return eps["value"] / 255 if eps["unit"] == "per255" else float(eps["value"])


def to_unit_list(eps_list: dict) -> list[float]:
    return [to_unit({"value": v, "unit": eps_list["unit"]}) for v in eps_list["values"]]


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("schedule",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce(obj, schema: dict):
    """Store integers that sit in ``number`` fields as floats, so 1 and 1.0 hash alike."""
    for option in schema.get("oneOf", []):
        if option.get("type") == "object" and isinstance(obj, dict):
            return _coerce(obj, option)
    kind = schema.get("type")
    if isinstance(obj, dict):
        props = schema.get("properties", {})
        return {k: _coerce(v, props.get(k, {})) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_coerce(v, schema.get("items", {})) for v in obj]
    if kind == "number" and isinstance(obj, int) and not isinstance(obj, bool):
        return float(obj)
    return obj


def validate(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError([f"{'.'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors])


def canonicalize(doc: dict) -> dict:
    """Validate, fill defaults and return a key-sorted plain dict."""
    validate(doc)
    full = _merge(DEFAULTS, doc)
    validate(full)
    return json.loads(json.dumps(_coerce(full, SCHEMA), sort_keys=True))


def fingerprint(doc: dict) -> str:
    """sha256 of the canonical JSON form; the output directory is not part of it."""
    canon = canonicalize(doc)
    canon.pop("output_dir", None)
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------- overrides


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not of the form dotted.path=value"])
    key, raw = text.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise ConfigError([f"override {text!r} has an empty path component"])
    return path, yaml.safe_load(raw)


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides (values parsed as YAML scalars or flow collections).

    Setting the same path twice to different values, or setting both a path
    and one of its ancestors, is a conflict.
    """
    parsed = [parse_override(o) for o in overrides]
    seen: dict[tuple, Any] = {}
    for path, value in parsed:
        key = tuple(path)
        if key in seen and seen[key] != value:
            raise ConfigError([f"conflicting overrides for {'.'.join(path)}: {seen[key]!r} vs {value!r}"])
        for other in seen:
            short, long_ = sorted((key, other), key=len)
            if short != long_ and long_[: len(short)] == short:
                raise ConfigError([f"conflicting overrides: {'.'.join(short)} and {'.'.join(long_)}"])
        seen[key] = value
    out = copy.deepcopy(doc)
    for path, value in parsed:
        node = out
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[path[-1]] = value
    return out


# --------------------------------------------------------------------------- loading


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated, canonical experiment description."""

    data: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return cls(canonicalize(doc))

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        doc = yaml.safe_load(text)
        if not isinstance(doc, dict):
            raise ConfigError(["<root>: document must be a mapping"])
        return cls.from_dict(doc)

    @classmethod
    def load(cls, source: str, overrides: list[str] | None = None) -> "ExperimentConfig":
        """Load a preset name or a YAML file, then apply dotted overrides."""
        if source in PRESETS:
            text = resources.files("advtune.presets").joinpath(f"{source}.yaml").read_text()
        else:
            path = Path(source)
            if not path.exists():
                raise ConfigError([f"config {source!r} is neither a preset ({', '.join(PRESETS)}) nor a file"])
            text = path.read_text()
        doc = yaml.safe_load(text)
        if not isinstance(doc, dict):
            raise ConfigError(["<root>: document must be a mapping"])
        return cls.from_dict(apply_overrides(doc, overrides or []))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.data)

    def __getitem__(self, key):
        return self.data[key]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.data == other.data

    def __hash__(self):
        return hash(self.fingerprint)

    def data_root(self) -> Path:
        root = self.data["dataset"]["root"] or os.environ.get(DATA_ENV)
        if not root:
            raise ConfigError([f"dataset.root: not set and ${DATA_ENV} is undefined"])
        return Path(root)
