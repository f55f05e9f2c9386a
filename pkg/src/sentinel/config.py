"""Pipeline configuration: one JSON document, overridable field by field."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Optional

from .errors import SentinelError


class ConfigError(SentinelError, ValueError):
    """Bad configuration document or override."""


DEFAULTS: dict[str, Any] = {
    "workdir": "run",
    "seed": 0,
    "workers": None,
    "slides": None,  # list of manifest paths; None -> use the synthetic registry
    "synthetic": {
        "n_normal": 20,
        "n_tumor": 20,
        "size": [960, 960],
        "n_levels": 4,
        "tissue_blobs": 3,
        "tissue_radius": [90.0, 130.0],
        "tumor_blobs": [1, 2],
        "tumor_radius": [45.0, 70.0],
        # alternating per-site stain protocols (affine in Lab, tissue only)
        "institutions": [
            {"stain_scale": [1.0, 1.0, 1.0], "stain_shift": [0.0, 0.0, 0.0]},
            {"stain_scale": [0.9, 1.15, 1.1], "stain_shift": [-8.0, 6.0, -8.0]},
        ],
    },
    "segmentation": {"blur_kernel": 7, "min_component_area": 256, "connectivity": 8, "saturation_floor": 20},
    "tiling": {"tile_size": 40, "level": 0, "min_coverage": 0.25},
    "stain": {"enabled": True, "target_slides": None, "saturation_floor": 20},
    "network": {"profile": "desk", "crop_size": 32},
    "training": {
        "learning_rate": 0.01,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "batch_size": 32,
        "epochs": 6,
        "samples_per_epoch": 1200,
        "balanced": True,
    },
    "heatmap": {"ratio": 8, "threshold": 0.5, "colormap": "jet"},
    "forest": {"n_trees": 100, "max_depth": None, "min_samples_leaf": 1, "max_features": "sqrt", "bootstrap": True},
    "evaluation": {"decision_threshold": 0.5},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k == "format_version":
            continue
        if k not in out:
            raise ConfigError(f"unknown config field {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
        cfg = _merge(cfg, doc)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def parse_assignment(text: str) -> dict:
    """``"training.epochs=3"`` -> ``{"training": {"epochs": 3}}`` (value parsed as JSON when possible)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            deep_update(base[k], v)
        else:
            base[k] = v
    return base
