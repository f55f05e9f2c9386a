"""A small numpy convolutional network with a two-way softmax head.

Activations are NHWC throughout; conv weights are stored (out, in, k, k).
The reference path runs in float64.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import NumericFailure, ShapeError

CLASSES = ("tissue", "tumor")
LAYER_TYPES = ("conv", "maxpool", "relu", "fc", "softmax")


@dataclass
class NetworkConfig:
    """Input size plus an ordered list of layer specs.

    Layer specs are dicts::

        {"type": "conv", "kernel": 3, "stride": 1, "out": 16, "pad": 1}
        {"type": "maxpool", "kernel": 2, "stride": 2}
        {"type": "relu"}
        {"type": "fc", "out": 64}          # optional "in" is checked
        {"type": "softmax"}                # must be last, after fc(out=2)
    """

    input_size: tuple[int, int, int]  # (H, W, 3)
    layers: list[dict]
    input_scale: float = 1.0 / 64.0
    name: str = "custom"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.layers = [dict(l) for l in self.layers]

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape (without batch axis) after each layer; raises on mismatch."""
        h, w, c = self.input_size
        if c != 3:
            raise ShapeError("input must have 3 channels")
        shape: tuple[int, ...] = (c, h, w)
        out = []
        if not self.layers or self.layers[-1].get("type") != "softmax":
            raise ShapeError("final layer must be a 2-way softmax")
        for i, spec in enumerate(self.layers):
            kind = spec.get("type")
            if kind not in LAYER_TYPES:
                raise ShapeError(f"layer {i}: unknown type {kind!r}")
            if kind in ("conv", "maxpool"):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i}: {kind} needs a spatial input, got {shape}")
                k, s = int(spec["kernel"]), int(spec.get("stride", 1 if kind == "conv" else spec["kernel"]))
                p = int(spec.get("pad", 0)) if kind == "conv" else 0
                ch, hh, ww = shape
                oh, ow = (hh + 2 * p - k) // s + 1, (ww + 2 * p - k) // s + 1
                if oh < 1 or ow < 1:
                    raise ShapeError(f"layer {i}: {kind} kernel {k} does not fit input {shape}")
                shape = (int(spec["out"]) if kind == "conv" else ch, oh, ow)
            elif kind == "fc":
                fan_in = int(np.prod(shape))
                if "in" in spec and int(spec["in"]) != fan_in:
                    raise ShapeError(f"layer {i}: fc expects {spec['in']} inputs but receives {fan_in}")
                shape = (int(spec["out"]),)
            elif kind == "softmax":
                if i != len(self.layers) - 1:
                    raise ShapeError("softmax must be the final layer")
                if shape != (2,):
                    raise ShapeError(f"softmax expects 2 logits, got shape {shape}")
            out.append(shape)
        return out

    def param_shapes(self) -> list[Optional[tuple[tuple[int, ...], tuple[int, ...]]]]:
        shapes = self.shapes()
        h, w, c = self.input_size
        prev = (c, h, w)
        result = []
        for spec, shape in zip(self.layers, shapes):
            if spec["type"] == "conv":
                k = int(spec["kernel"])
                result.append(((int(spec["out"]), prev[0], k, k), (int(spec["out"]),)))
            elif spec["type"] == "fc":
                result.append(((int(np.prod(prev)), int(spec["out"])), (int(spec["out"]),)))
            else:
                result.append(None)
            prev = shape
        return result

    def parameter_count(self) -> int:
        return sum(int(np.prod(w)) + int(np.prod(b)) for w, b in filter(None, self.param_shapes()))

    @property
    def crop_size(self) -> int:
        return self.input_size[0]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_size": list(self.input_size),
            "input_scale": self.input_scale,
            "layers": copy.deepcopy(self.layers),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkConfig":
        return cls(tuple(doc["input_size"]), doc["layers"], float(doc.get("input_scale", 1 / 64)), doc.get("name", "custom"))


def desk_profile(crop: int = 32) -> NetworkConfig:
    """3 conv + 2 fc; default for desk-scale runs on 40x40 tiles."""
    return NetworkConfig(
        input_size=(crop, crop, 3),
        layers=[
            {"type": "conv", "kernel": 3, "stride": 1, "pad": 1, "out": 16},
            {"type": "relu"},
            {"type": "maxpool", "kernel": 2, "stride": 2},
            {"type": "conv", "kernel": 3, "stride": 1, "pad": 1, "out": 32},
            {"type": "relu"},
            {"type": "maxpool", "kernel": 2, "stride": 2},
            {"type": "conv", "kernel": 3, "stride": 1, "pad": 1, "out": 32},
            {"type": "relu"},
            {"type": "maxpool", "kernel": 2, "stride": 2},
            {"type": "fc", "out": 64},
            {"type": "relu"},
            {"type": "fc", "out": 2},
            {"type": "softmax"},
        ],
        name="desk",
    )


def alexnet_profile() -> NetworkConfig:
    """Five conv and three fc layers on 224x224 crops (no local response norm)."""
    return NetworkConfig(
        input_size=(224, 224, 3),
        layers=[
            {"type": "conv", "kernel": 11, "stride": 4, "pad": 2, "out": 96},
            {"type": "relu"},
            {"type": "maxpool", "kernel": 3, "stride": 2},
            {"type": "conv", "kernel": 5, "stride": 1, "pad": 2, "out": 256},
            {"type": "relu"},
            {"type": "maxpool", "kernel": 3, "stride": 2},
            {"type": "conv", "kernel": 3, "stride": 1, "pad": 1, "out": 384},
            {"type": "relu"},
            {"type": "conv", "kernel": 3, "stride": 1, "pad": 1, "out": 384},
            {"type": "relu"},
            {"type": "conv", "kernel": 3, "stride": 1, "pad": 1, "out": 256},
            {"type": "relu"},
            {"type": "maxpool", "kernel": 3, "stride": 2},
            {"type": "fc", "out": 4096},
            {"type": "relu"},
            {"type": "fc", "out": 4096},
            {"type": "relu"},
            {"type": "fc", "out": 2},
            {"type": "softmax"},
        ],
        input_scale=1.0 / 64.0,
        name="alexnet-full",
    )


PROFILES = {"desk": desk_profile, "alexnet-full": alexnet_profile}


@dataclass
class NetworkParams:
    """Per-layer ``{"W", "b"}`` dicts (``None`` for parameter-free layers)."""

    config: NetworkConfig
    layers: list[Optional[dict]] = field(default_factory=list)

    def arrays(self):
        """Yield ``(name, array)`` in layer order: W then b."""
        for i, p in enumerate(self.layers):
            if p is not None:
                yield f"layer{i}.W", p["W"]
                yield f"layer{i}.b", p["b"]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, [None if p is None else {k: v.copy() for k, v in p.items()} for p in self.layers])

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.config, [None if p is None else {k: v.astype(dtype) for k, v in p.items()} for p in self.layers])

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams(self.config, [None if p is None else {k: np.zeros_like(v) for k, v in p.items()} for p in self.layers])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.arrays())


def init_network(config: NetworkConfig, seed: int) -> NetworkParams:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for shapes in config.param_shapes():
        if shapes is None:
            layers.append(None)
            continue
        w_shape, b_shape = shapes
        fan_in = int(np.prod(w_shape[1:])) if len(w_shape) == 4 else w_shape[0]
        layers.append({
            "W": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w_shape),
            "b": np.zeros(b_shape),
        })
    return NetworkParams(config, layers)


def zero_network(config: NetworkConfig) -> NetworkParams:
    params = init_network(config, 0)
    for p in params.layers:
        if p is not None:
            p["W"][...] = 0.0
    return params


# --------------------------------------------------------------------------
# layer kernels

def _conv_forward(x, W, b, stride, pad):
    n, h, w, c = x.shape
    f, _, k, _ = W.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    oh, ow = (xp.shape[1] - k) // stride + 1, (xp.shape[2] - k) // stride + 1
    cols = np.empty((n, oh, ow, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    cols = cols.reshape(n * oh * ow, k * k * c)
    wmat = W.transpose(0, 2, 3, 1).reshape(f, -1)
    out = (cols @ wmat.T + b).reshape(n, oh, ow, f)
    return out, (x.shape, xp.shape, cols, oh, ow)


def _conv_backward(dout, W, cache, stride, pad):
    x_shape, xp_shape, cols, oh, ow = cache
    n, h, w, c = x_shape
    f, _, k, _ = W.shape
    d2 = dout.reshape(-1, f)
    dW = (d2.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.transpose(0, 2, 3, 1).reshape(f, -1)).reshape(n, oh, ow, k, k, c)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad:pad + h, pad:pad + w, :] if pad else dxp
    return dx, dW, db


def _pool_forward(x, k, stride):
    n, h, w, c = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    out = None
    for i in range(k):
        for j in range(k):
            view = x[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
            out = view.copy() if out is None else np.maximum(out, view)
    return out, (x, out, oh, ow)


def _pool_backward(dout, cache, k, stride):
    # gradient goes to the first maximal element of each window (row-major)
    x, out, oh, ow = cache
    dx = np.zeros(x.shape, dtype=dout.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(i, i + stride * oh, stride), slice(j, j + stride * ow, stride), slice(None))
            hit = (x[sl] == out) & ~taken
            taken |= hit
            dx[sl] += np.where(hit, dout, 0.0)
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _prepare(batch, config: NetworkConfig, dtype):
    x = np.asarray(batch, dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != config.input_size:
        raise ShapeError(f"batch items have shape {x.shape[1:]}, network expects {config.input_size}")
    return x * dtype(config.input_scale)


def _forward(params: NetworkParams, x):
    caches = []
    for spec, p in zip(params.config.layers, params.layers):
        kind = spec["type"]
        if kind == "conv":
            x, cache = _conv_forward(x, p["W"], p["b"], int(spec.get("stride", 1)), int(spec.get("pad", 0)))
        elif kind == "maxpool":
            k = int(spec["kernel"])
            x, cache = _pool_forward(x, k, int(spec.get("stride", k)))
        elif kind == "relu":
            cache = x > 0
            x = x * cache
        elif kind == "fc":
            cache = x.shape
            flat = x.reshape(x.shape[0], -1)
            x = flat @ p["W"] + p["b"]
            cache = (cache, flat)
        else:  # softmax: logits are returned, probabilities computed by callers
            cache = None
        caches.append(cache)
    return x, caches


def logits(params: NetworkParams, batch, dtype=np.float64) -> np.ndarray:
    out, _ = _forward(params.astype(dtype) if dtype is not np.float64 else params, _prepare(batch, params.config, dtype))
    return out


def forward(params: NetworkParams, batch, dtype=np.float64) -> np.ndarray:
    """Class probabilities, shape ``(n, 2)``: columns are (p_tissue, p_tumor).

    ``batch`` is NHWC, already mean-subtracted. ``dtype=np.float32`` selects
    the fast path.
    """
    z = logits(params, batch, dtype)
    if not np.all(np.isfinite(z)):
        raise NumericFailure("non-finite logits")
    return softmax(z)


def weight_decay_term(params: NetworkParams, weight_decay: float) -> float:
    if not weight_decay:
        return 0.0
    return 0.5 * weight_decay * sum(float(np.sum(p["W"] ** 2)) for p in params.layers if p is not None)


def loss_and_gradients(params: NetworkParams, batch, labels, weight_decay: float = 0.0):
    """Mean cross-entropy (+ L2 on weights) and its gradient for every parameter.

    ``labels`` are class indices (0 = tissue, 1 = tumor).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or np.any((labels < 0) | (labels > 1)):
        raise ValueError("labels must be a 1-D array of 0 (tissue) / 1 (tumor)")
    x = _prepare(batch, params.config, np.float64)
    if len(labels) != x.shape[0]:
        raise ShapeError("labels and batch differ in length")
    z, caches = _forward(params, x)
    if not np.all(np.isfinite(z)):
        raise NumericFailure("non-finite activations in forward pass")
    n = len(labels)
    zs = z - z.max(axis=1, keepdims=True)
    log_p = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = -float(log_p[np.arange(n), labels].mean()) + weight_decay_term(params, weight_decay)

    grads = params.zeros_like()
    d = np.exp(log_p)
    d[np.arange(n), labels] -= 1.0
    d /= n
    for i in range(len(params.layers) - 1, -1, -1):
        spec, p, cache = params.config.layers[i], params.layers[i], caches[i]
        kind = spec["type"]
        if kind == "softmax":
            continue
        if kind == "fc":
            shape, flat = cache
            grads.layers[i]["W"] = flat.T @ d + weight_decay * p["W"]
            grads.layers[i]["b"] = d.sum(axis=0)
            d = (d @ p["W"].T).reshape(shape)
        elif kind == "relu":
            d = d * cache
        elif kind == "maxpool":
            k = int(spec["kernel"])
            d = _pool_backward(d, cache, k, int(spec.get("stride", k)))
        elif kind == "conv":
            d, dW, db = _conv_backward(d, p["W"], cache, int(spec.get("stride", 1)), int(spec.get("pad", 0)))
            grads.layers[i]["W"] = dW + weight_decay * p["W"]
            grads.layers[i]["b"] = db
    if not np.isfinite(loss) or not grads.all_finite():
        raise NumericFailure("non-finite loss or gradient")
    return loss, grads
