"""Run configuration: defaults, file loading, dotted CLI overrides.

Precedence is defaults < file < overrides. Unknown keys are rejected with a
closest-match suggestion; every run embeds the fully resolved document (and
its hash) in its outputs.
"""

import dataclasses
import difflib
import hashlib
import json
from dataclasses import dataclass, field, fields

import yaml

from seqdistill.cfsrec import CfTrainConfig
from seqdistill.dataio import MarkovSpec
from seqdistill.distill import DistillTrainConfig
from seqdistill.errors import ConfigError
from seqdistill.frozenenc import EncoderConfig


@dataclass
class EvalConfig:
    m: int = 99            # negatives per candidate set
    ns: tuple = (10, 20)
    phase: str = "test"


@dataclass
class Config:
    seed: int = 0
    deterministic: bool = False
    out: str = "runs"
    data: str = ""
    synth: MarkovSpec = field(default_factory=MarkovSpec)
    cf: CfTrainConfig = field(default_factory=CfTrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    distill: DistillTrainConfig = field(default_factory=DistillTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = ("synth", "cf", "encoder", "distill", "eval")


def _coerce(value, target, path):
    if target is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{path}: expected bool, got {value!r}")
    if target is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{path}: expected int, got {value!r}")
        return int(value)
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected float, got {value!r}")
        return float(value)
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if target is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        return tuple(value)
    return value   # Optional[int] and friends: accept as-is


def _field_types(cls):
    out = {}
    for f in fields(cls):
        t = f.type
        if isinstance(t, str):
            t = {"int": int, "float": float, "str": str, "bool": bool,
                 "tuple": tuple}.get(t, None)
        out[f.name] = t
    return out


def _apply(obj, doc, path=""):
    types = _field_types(type(obj))
    updates = {}
    for key, value in doc.items():
        here = f"{path}{key}"
        if key not in types:
            hint = difflib.get_close_matches(key, types.keys(), n=1)
            extra = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"unknown config key {here!r}{extra}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{here}: expected a mapping")
            updates[key] = _apply(current, value, path=f"{here}.")
        else:
            updates[key] = _coerce(value, types[key], here)
    return dataclasses.replace(obj, **updates)


def _parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: bad value ({exc})") from exc
    doc = {}
    node = doc
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return doc


def load_config(path=None, overrides=()):
    """Resolve a Config: defaults, then the file, then dotted overrides."""
    config = Config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        config = _apply(config, doc)
    for text in overrides:
        config = _apply(config, _parse_override(text))
    return config


def config_to_dict(config):
    return dataclasses.asdict(config)


def config_hash(config):
    doc = json.dumps(config_to_dict(config), sort_keys=True, default=str)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()
