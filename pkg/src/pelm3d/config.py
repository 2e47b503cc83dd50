"""Run configuration: YAML file, versioned JSON schema, presets and fingerprints."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema
import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_seed = {"type": "integer", "minimum": 0}
_pos_int_list = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "pelm3d run config",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "corpus"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": _seed,
        "output_dir": {"type": "string"},
        "corpus": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source"],
            "properties": {
                "source": {"type": "string"},
                "format": {"enum": ["csv", "dir"]},
                "min_frequency": {"type": "integer", "minimum": 1},
                "max_terms": {"type": ["integer", "null"], "minimum": 1},
                "subsample": {"type": ["integer", "null"], "minimum": 2},
                "subsample_seed": _seed,
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": _seed,
            },
        },
        "optics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"type": "string"},
                "mode": {"enum": ["angular-spectrum", "random-unitary"]},
                "bits": {"enum": [0, 8, 12]},
                "z": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "block": {"type": "integer", "minimum": 1},
                "grid": {"type": ["integer", "null"], "minimum": 1},
                "wavelength": {"type": "number", "exclusiveMinimum": 0},
                "pitch": {"type": "number", "exclusiveMinimum": 0},
                "slm_bits": {"type": "integer", "minimum": 0, "maximum": 16},
                "noise_std": {"type": "number", "minimum": 0},
                "noise_seed": _seed,
                "embedding_seed": _seed,
                "plane_seed": _seed,
                "calibration_size": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
            },
        },
        "learning": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda": {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "cv"}]},
                "lambda_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "cv_folds": {"type": "integer", "minimum": 2},
                "M": {"type": ["integer", "null"], "minimum": 1},
                "n_train": {"type": ["integer", "null"], "minimum": 1},
                "bias": {"type": "boolean"},
                "seed": _seed,
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "M_values": _pos_int_list,
                "n_train_values": _pos_int_list,
                "repeats": {"type": "integer", "minimum": 1},
                "seeds": {"type": ["array", "null"], "items": _seed},
                "n_jobs": {"type": "integer", "minimum": 1},
                "split_study": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "required": ["fractions", "M_values"],
                    "properties": {
                        "fractions": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}, "minItems": 1},
                        "M_values": _pos_int_list,
                        "repeats": {"type": "integer", "minimum": 1},
                        "tolerance": {"type": "number", "minimum": 0},
                    },
                },
                "saturation": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "required": ["runs", "M_values"],
                    "properties": {
                        "runs": {"type": "array", "items": {"type": "string"}, "minItems": 2},
                        "M_values": _pos_int_list,
                        "n_train": {"type": ["integer", "null"], "minimum": 1},
                        "epsilon": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
            },
        },
        "diagnose": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "masks": {"type": "integer", "minimum": 16},
                "seed": _seed,
            },
        },
    },
}

# z in metres past the focal plane; spacings keep mean |rho| between planes
# under 0.05 for 532 nm light and an 8 um focal-plane pitch, both for uniform
# random masks and for the narrow phase spread of real tf-idf masks.
PRESETS = {
    "desk": {
        "mode": "angular-spectrum", "bits": 0, "z": [1e-3, 12e-3, 23e-3], "block": 1, "grid": None,
        "wavelength": 532e-9, "pitch": 8e-6, "slm_bits": 8,
    },
    "paper": {
        "mode": "angular-spectrum", "bits": 0, "z": [1e-3, 30e-3, 60e-3], "block": 2, "grid": 400,
        "wavelength": 532e-9, "pitch": 8e-6, "slm_bits": 8,
    },
    "fast": {
        "mode": "random-unitary", "bits": 0, "z": [1e-3, 2e-3, 3e-3], "block": 1, "grid": None,
        "wavelength": 532e-9, "pitch": 8e-6, "slm_bits": 8,
    },
}

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "corpus": {"format": "csv", "min_frequency": 1, "max_terms": None, "subsample": None},
    "split": {"train_fraction": 0.67},
    "optics": {
        "preset": "desk", "noise_std": 0.0, "calibration_size": 256, "batch_size": 64,
    },
    "learning": {"lambda": 1e-4, "lambda_grid": [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2], "cv_folds": 5,
                 "M": None, "n_train": None, "bias": False},
    "sweep": {
        "lambda": None, "M_values": [2, 4, 6, 8, 10, 12, 16, 32], "n_train_values": [8],
        "repeats": 5, "seeds": None, "n_jobs": 1, "split_study": None, "saturation": None,
    },
    "diagnose": {"masks": 64},
}

_SEEDED = {
    ("corpus", "subsample_seed"), ("split", "seed"), ("optics", "noise_seed"),
    ("optics", "embedding_seed"), ("optics", "plane_seed"), ("learning", "seed"), ("diagnose", "seed"),
}


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Load, validate and resolve a config.

    ``overrides`` maps ``"section.key"`` (or a top-level key) to a value and
    is applied after the file. Missing seeds take the top-level ``seed``;
    preset values fill optics keys not set explicitly.
    """
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = copy.deepcopy(raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, leaf = key.rpartition(".")
        target = raw.setdefault(section, {}) if section else raw
        target[leaf] = value
    validate(raw)
    return resolve(raw)


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None


def resolve(raw: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    for k, v in raw.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    preset_name = cfg["optics"]["preset"]
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown optics preset {preset_name!r}; choose from {sorted(PRESETS)}")
    for k, v in PRESETS[preset_name].items():
        cfg["optics"].setdefault(k, v)
    if len(set(cfg["optics"]["z"])) != len(cfg["optics"]["z"]):
        raise ConfigError("optics.z values must be distinct")
    for section, key in _SEEDED:
        cfg[section].setdefault(key, cfg["seed"])
    return cfg


def canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(*parts) -> str:
    """SHA-256 over the canonical JSON of ``parts``."""
    return hashlib.sha256(canonical(list(parts)).encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def source_digest(path) -> str:
    """Content digest of a corpus file, or of every ``.txt`` under a directory."""
    p = Path(path)
    if p.is_file():
        return file_digest(p)
    h = hashlib.sha256()
    for f in sorted(p.rglob("*.txt")):
        h.update(str(f.relative_to(p)).encode())
        h.update(file_digest(f).encode())
    return h.hexdigest()
