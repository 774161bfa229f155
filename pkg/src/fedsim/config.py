"""Experiment config files: parsing, strict validation, overrides, hashing.

Configs are nested key/value YAML. Every field of the experiment config is
addressable; unknown keys are rejected with a path-qualified message. The
config hash is taken over a canonical (sorted-key) JSON rendering, so it is
stable under reordering of keys in the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import fields, is_dataclass

import yaml

from .attacks import LocalTrainConfig, PatchSpec, TextTriggerConfig, TriggerOptConfig
from .defenses import AggregatorConfig
from .engine import AttackConfig, DatasetConfig, ExperimentConfig, ScenarioConfig


class ConfigError(ValueError):
    pass


_TUPLE_FIELDS = {"window", "hidden_sizes"}


def _coerce(value, target_type, path):
    if target_type is float and isinstance(value, (int, float)):
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if target_type is bool and not isinstance(value, bool):
        raise ConfigError(f"{path}: expected true/false, got {value!r}")
    return value


def _build_dataclass(cls, mapping, path):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    spec = {f.name: f for f in fields(cls)}
    unknown = sorted(set(mapping) - set(spec))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in mapping.items():
        f = spec[name]
        sub_path = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if is_dataclass(default) and isinstance(value, dict):
            kwargs[name] = _build_dataclass(type(default), value, sub_path)
        elif name in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub_path}: expected a list")
            kwargs[name] = tuple(int(v) for v in value)
        else:
            kwargs[name] = _coerce(value, type(default) if default is not None else object, sub_path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_SECTIONS = {
    "dataset": DatasetConfig,
    "train": LocalTrainConfig,
    "scenario": ScenarioConfig,
    "attack": AttackConfig,
    "defense": AggregatorConfig,
}
_ATTACK_SUBSECTIONS = {"trigger": TriggerOptConfig, "text": TextTriggerConfig, "patch": PatchSpec}


def config_from_mapping(mapping) -> ExperimentConfig:
    cfg = _build_dataclass(ExperimentConfig, mapping, "")
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        apply_override(raw, item)
    return config_from_mapping(raw)


def apply_override(mapping, assignment: str) -> None:
    """Apply one dotted-path override of the form a.b.c=value (YAML scalar)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, text = assignment.split("=", 1)
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {assignment!r} has an empty key path")
    value = yaml.safe_load(text)
    node = mapping
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {key} is not a mapping")
    node[keys[-1]] = value


def config_to_mapping(cfg: ExperimentConfig) -> dict:
    def unpack(obj):
        if is_dataclass(obj):
            return {f.name: unpack(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    return unpack(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_mapping(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_mapping(cfg), fh, sort_keys=True)
