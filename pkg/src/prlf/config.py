"""
Layered run configuration.

Settings live in sections mirroring the package modules and resolve with
precedence: command-line flag > PRLF_* environment variable > config file
> built-in default. The config file is INI-style text; unknown sections
or keys are hard errors so typos fail fast.
"""

from __future__ import annotations

import configparser
from typing import Any

from .errors import ConfigError

ENV_PREFIX = "PRLF_"

# section -> key -> (type tag, default)
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "run": {
        "seed": ("int", 0),
    },
    "datagen": {
        "samples": ("int", 1000),
        "classes": ("int", 2),
        "noise_scale": ("float", 1.0),
        "key_frames": ("int", 4),
        "informative_v": ("float", 0.25),
        "informative_a": ("float", 0.25),
        "informative_l": ("float", 0.5),
        "seq_len_v": ("int", 16),
        "seq_len_a": ("int", 16),
        "seq_len_l": ("int", 16),
        "feat_dim_v": ("int", 20),
        "feat_dim_a": ("int", 20),
        "feat_dim_l": ("int", 32),
        "with_scores": ("bool", True),
        "train_fraction": ("float", 0.7),
        "val_fraction": ("float", 0.15),
    },
    "model": {
        "tokens": ("int", 8),
        "dim": ("int", 64),
        "dropout": ("float", 0.1),
        "scalar_fusion_weight": ("bool", False),
        "shared_decomposer": ("bool", False),
        "token_gate": ("bool", False),
        "fisher_mode": ("str", "output-jacobian"),
    },
    "training": {
        "eta1": ("float", 0.5),
        "eta2": ("float", 0.1),
        "gamma": ("float", 0.8),
        "steps": ("int", 4),
        "lr": ("float", 0.05),
        "momentum": ("float", 0.9),
        "optimizer": ("str", "sgd"),
        "epochs": ("int", 20),
        "batch_size": ("int", 32),
        "p_train": ("float", 0.5),
    },
    "eval": {
        "f1_mode": ("str", "binary"),
        "seeds": ("int", 5),
        "rates": ("str", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"),
        "phase_rates": ("str", "0,0.3,0.6,0.9"),
    },
}


def defaults() -> dict[str, dict[str, Any]]:
    return {section: {key: spec[1] for key, spec in keys.items()}
            for section, keys in SCHEMA.items()}


def _coerce(section: str, key: str, raw: str) -> Any:
    kind = SCHEMA[section][key][0]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {kind}") from None


def load_config_file(path: str) -> dict[str, dict[str, Any]]:
    """Parse an INI config file against the schema (unknown keys fail)."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None

    out: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}] in {path}")
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}] of {path}")
            out[section][key] = _coerce(section, key, raw)
    return out


def resolve(file_values: dict | None = None,
            overrides: dict | None = None) -> dict[str, dict[str, Any]]:
    """Merge defaults <- config file <- explicit overrides.

    ``overrides`` uses the same nested {section: {key: value}} shape and
    wins over everything; values equal to None are ignored.
    """
    merged = defaults()
    for layer in (file_values or {}, overrides or {}):
        for section, keys in layer.items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in keys.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                if value is not None:
                    merged[section][key] = value
    return merged


def parse_rate_list(text: str) -> list[float]:
    try:
        rates = [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigError(f"cannot parse rate list {text!r}") from None
    if not rates or any(not 0.0 <= r <= 1.0 for r in rates):
        raise ConfigError(f"rates must lie in [0,1]: {text!r}")
    return rates
