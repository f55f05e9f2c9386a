"""Versioned model document: config + little-endian float64 arrays + SHA-256."""
from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .. import FORMAT_VERSION
from ..errors import MissingArtifactError, SentinelError
from .network import NetworkConfig, NetworkParams

DTYPE = "<f8"


def _encode(arr: np.ndarray) -> tuple[dict, bytes]:
    raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
    return {"shape": list(arr.shape), "data": base64.b64encode(raw).decode("ascii")}, raw


def _decode(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype=DTYPE).reshape(doc["shape"]).astype(np.float64)


def model_to_dict(params: NetworkParams, mean_image: Optional[np.ndarray] = None) -> dict:
    digest = hashlib.sha256()
    arrays = []
    for name, arr in params.arrays():
        enc, raw = _encode(arr)
        enc["name"] = name
        arrays.append(enc)
        digest.update(raw)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "tile-classifier",
        "dtype": DTYPE,
        "config": params.config.to_dict(),
        "arrays": arrays,
    }
    if mean_image is not None:
        enc, raw = _encode(mean_image)
        doc["mean_image"] = enc
        digest.update(raw)
    doc["sha256"] = digest.hexdigest()
    return doc


def model_from_dict(doc: dict) -> tuple[NetworkParams, Optional[np.ndarray]]:
    if doc.get("kind") != "tile-classifier":
        raise SentinelError("not a tile-classifier model document")
    config = NetworkConfig.from_dict(doc["config"])
    digest = hashlib.sha256()
    decoded = {}
    for enc in doc["arrays"]:
        arr = _decode(enc)
        digest.update(np.ascontiguousarray(arr, dtype=DTYPE).tobytes())
        decoded[enc["name"]] = arr
    mean = None
    if "mean_image" in doc:
        mean = _decode(doc["mean_image"])
        digest.update(np.ascontiguousarray(mean, dtype=DTYPE).tobytes())
    if digest.hexdigest() != doc.get("sha256"):
        raise SentinelError("model checksum mismatch")
    layers = []
    for i, shapes in enumerate(config.param_shapes()):
        if shapes is None:
            layers.append(None)
            continue
        W, b = decoded[f"layer{i}.W"], decoded[f"layer{i}.b"]
        if (W.shape, b.shape) != shapes:
            raise SentinelError(f"layer {i} parameter shapes do not match the config")
        layers.append({"W": W, "b": b})
    return NetworkParams(config, layers), mean


def save_model(path, params: NetworkParams, mean_image: Optional[np.ndarray] = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(params, mean_image)) + "\n")


def load_model(path) -> tuple[NetworkParams, Optional[np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "train-tiles")
    return model_from_dict(json.loads(path.read_text()))
