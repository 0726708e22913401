"""Declarative run configuration: JSON files, named profiles, dotted-path
overrides, and typed section builders with field-level diagnostics.

Relative dataset paths resolve against the SATLAB_DATA environment variable
when they do not exist locally.
"""

import dataclasses
import json
import os
from importlib import resources

from .attacks import AttackConfig
from .data import load_cifar10_binary, make_toy_dataset
from .errors import ConfigurationError
from .losses import LossWeights
from .training import TrainConfig

DATA_ENV = "SATLAB_DATA"


def load_profile(name):
    """A shipped profile by name, or any JSON file by path."""
    if os.path.exists(name):
        with open(name, "r", encoding="utf-8") as fh:
            return json.load(fh)
    candidate = resources.files("satlab").joinpath(f"profiles/{name}.json")
    if candidate.is_file():
        return json.loads(candidate.read_text())
    raise ConfigurationError(f"profile: unknown profile {name!r}")


def deep_merge(base, override):
    """Recursive dict merge; override wins, dicts merge key-wise."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(text):
    if "=" not in text:
        raise ConfigurationError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(config, overrides):
    for text in overrides:
        key, value = parse_override(text)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                node[part] = nxt
            node = nxt
        node[parts[-1]] = value
    return config


def load_config(path, overrides=()):
    """Parse the config file, merge its profile, apply --set overrides."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(config, dict):
        raise ConfigurationError("config root must be a JSON object")
    config = apply_overrides(config, overrides)
    profile = config.pop("profile", None)
    if profile is not None:
        config = deep_merge(load_profile(profile), config)
    return config


def resolve_data_path(path):
    """Absolute or locally existing paths win; else try under SATLAB_DATA."""
    if os.path.isabs(path) or os.path.exists(path):
        return path
    root = os.environ.get(DATA_ENV)
    if root:
        candidate = os.path.join(root, path)
        if os.path.exists(candidate):
            return candidate
    return path


def _check_fields(section, mapping, cls):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigurationError(
            f"{section}: unknown field(s) {', '.join(unknown)}; "
            f"known fields: {', '.join(sorted(known))}"
        )


def build_loss_weights(section, mapping):
    mapping = dict(mapping or {})
    _check_fields(section, mapping, LossWeights)
    return LossWeights(**mapping)


def build_train_config(mapping, seed=None):
    mapping = dict(mapping or {})
    weights = build_loss_weights("train.weights", mapping.pop("weights", {}))
    for key in ("decay_epochs", "margin_taps", "style_taps", "content_taps"):
        if key in mapping and mapping[key] is not None:
            mapping[key] = tuple(mapping[key])
    if seed is not None and "seed" not in mapping:
        mapping["seed"] = seed
    _check_fields("train", mapping, TrainConfig)
    return TrainConfig(weights=weights, **mapping)


def build_attack_config(mapping):
    mapping = dict(mapping or {})
    name = mapping.pop("name", "pgd")
    mapping.pop("mode", None)
    if "window" in mapping:
        mapping["window"] = tuple(mapping["window"])
    _check_fields("attack", mapping, AttackConfig)
    return name, AttackConfig(**mapping)


def build_dataset(mapping, seed=0):
    """Materialize the dataset section (toy generator or CIFAR-10 binary)."""
    mapping = dict(mapping or {})
    kind = mapping.get("kind")
    if kind == "toy":
        toy = dict(mapping.get("toy") or {})
        toy.setdefault("kind", "blobs")
        toy.setdefault("seed", seed)
        if "shape" in toy:
            toy["shape"] = tuple(toy["shape"])
        dataset = make_toy_dataset(**toy)
        dataset_id = f"toy:{toy.get('kind', 'blobs')}"
    elif kind == "cifar10":
        path = mapping.get("path")
        if not path:
            raise ConfigurationError("dataset.path is required for kind=cifar10")
        resolved = resolve_data_path(path)
        if not os.path.exists(resolved):
            raise ConfigurationError(
                f"dataset.path: {path!r} not found (also tried under ${DATA_ENV})"
            )
        dataset = load_cifar10_binary(resolved, split=mapping.get("split", "test"))
        dataset = dataset.normalize()
        dataset_id = os.path.basename(resolved)
    else:
        raise ConfigurationError(
            f"dataset.kind must be 'toy' or 'cifar10', got {kind!r}"
        )
    subset = mapping.get("subset")
    if subset is not None:
        if subset < 1:
            raise ConfigurationError("dataset.subset must be >= 1")
        dataset = dataset.subset(range(min(int(subset), len(dataset))))
    return dataset, dataset_id
