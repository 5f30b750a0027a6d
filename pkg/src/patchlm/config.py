"""Experiment configuration tree: YAML file + dotted CLI overrides, strict
key validation, and a stable hash echoed into every artifact."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

DEFAULTS = {
    "seed": 0,
    "out_dir": "out",
    "image": {
        "scheme": "letterbox",
        "resolution": 224,
    },
    "model": {
        "prompt_style": "base",
        "backbones": [
            {"name": "toy-vit", "patch_size": 14, "dim": 64, "depth": 4, "heads": 4},
        ],
        "projector_hidden": 128,
        "lm_dim": 128,
        "lm_depth": 4,
        "lm_heads": 4,
        "max_context": 512,
    },
    "data": {
        "path": None,  # synth dataset directory; generated when absent
        "n": 16,
        "canvas": 224,
        "include_language_only": True,
        "epoch_count": 1.0,
    },
    "train": {
        "procedure": "single-stage",
        "batch_size": 128,
        "max_grad_norm": 1.0,
        "weight_decay": 0.1,
        "peak_lr": 2e-5,
        "warmup_ratio": 0.03,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
    },
    "eval": {
        "max_new": 48,
        "workers": 1,
    },
    "analysis": {
        "pool": "group",  # z-score normalization pool: 'group' or 'global'
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults, override, path=""):
    if isinstance(defaults, dict):
        if not isinstance(override, dict):
            raise ConfigError(f"{path or 'config'}: expected a mapping")
        out = {}
        for key in override:
            if key not in defaults:
                raise ConfigError(f"unknown config key {path + key!r}")
        for key, dval in defaults.items():
            if key in override:
                out[key] = _merge(dval, override[key], f"{path}{key}.")
            else:
                out[key] = copy.deepcopy(dval)
        return out
    return copy.deepcopy(override)


def _parse_scalar(text: str):
    val = yaml.safe_load(text)
    # YAML 1.1 leaves dotless scientific notation ("1e-3") as a string
    if isinstance(val, str):
        try:
            return float(val)
        except ValueError:
            return val
    return val


def apply_override(cfg: dict, assignment: str) -> None:
    """In-place `section.key=value` override with YAML scalar parsing."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = _parse_scalar(raw)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """Resolve defaults + optional YAML file + CLI overrides; rejects unknown keys."""
    raw = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    cfg = _merge(DEFAULTS, raw)
    for assignment in overrides or []:
        apply_override(cfg, assignment)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
