"""SGD-with-momentum training of the tile classifier."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import NumericFailure, SentinelError
from ..seeding import derive_seed
from ..tiles import TISSUE, TUMOR, SplitAssignment, TileStore, augment_params, center_crop, compute_mean_image
from .network import NetworkConfig, NetworkParams, forward, init_network, loss_and_gradients

log = logging.getLogger(__name__)

LABEL_INDEX = {TISSUE: 0, TUMOR: 1}


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 12
    seed: int = 0
    crop_size: Optional[int] = None  # defaults to the network input size
    lr_decay: float = 0.1
    lr_step_fraction: float = 1.0 / 3.0
    balanced: bool = True
    samples_per_epoch: Optional[int] = None  # defaults to the training-set size

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        step = max(1, math.ceil(self.epochs * self.lr_step_fraction))
        return self.learning_rate * self.lr_decay ** (epoch // step)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainResult:
    params: NetworkParams
    mean_image: np.ndarray
    curve: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0


def sgd_step(params: NetworkParams, grads: NetworkParams, velocity: NetworkParams, lr: float, momentum: float) -> None:
    """In-place ``v = momentum*v - lr*g; p += v``."""
    for p, g, v in zip(params.layers, grads.layers, velocity.layers):
        if p is None:
            continue
        for key in ("W", "b"):
            v[key] *= momentum
            v[key] -= lr * g[key]
            p[key] += v[key]


def predict_batch(params: NetworkParams, images: np.ndarray, mean_image: np.ndarray, batch_size: int = 256, dtype=np.float64) -> np.ndarray:
    """p_tumor for each tile: mean subtraction, centre crop, no flip."""
    crop = params.config.crop_size
    out = np.empty(len(images))
    for s in range(0, len(images), batch_size):
        chunk = np.asarray(images[s:s + batch_size], dtype=np.float64) - mean_image
        x = np.stack([center_crop(t, crop) for t in chunk]) if len(chunk) else chunk
        out[s:s + batch_size] = forward(params, x, dtype=dtype)[:, 1]
    return out


def predict_tile(params: NetworkParams, tile_image: np.ndarray, mean_image: np.ndarray) -> float:
    tile_image = np.asarray(tile_image)
    if tile_image.shape != np.shape(mean_image):
        raise SentinelError(f"tile shape {tile_image.shape} does not match mean image {np.shape(mean_image)}")
    return float(predict_batch(params, tile_image[None], mean_image)[0])


def accuracy(params, images, labels, mean_image) -> float:
    if len(images) == 0:
        return float("nan")
    p = predict_batch(params, images, mean_image)
    return float(np.mean((p >= 0.5).astype(int) == np.asarray(labels)))


def _epoch_order(labels: np.ndarray, n_samples: int, balanced: bool, rng: np.random.Generator) -> np.ndarray:
    if not balanced:
        return rng.permutation(len(labels))[:n_samples] if n_samples <= len(labels) else rng.integers(0, len(labels), n_samples)
    pools = [np.flatnonzero(labels == c) for c in (0, 1)]
    pools = [p for p in pools if len(p)]
    cls = rng.integers(0, len(pools), size=n_samples)
    return np.array([pools[c][rng.integers(len(pools[c]))] for c in cls], dtype=np.int64)


def fit(
    images: np.ndarray,
    labels: Sequence[int],
    val_images: np.ndarray,
    val_labels: Sequence[int],
    net_config: NetworkConfig,
    train_config: TrainConfig,
    init: Optional[NetworkParams] = None,
) -> TrainResult:
    """Train on in-memory uint8 tiles (NHWC) with integer labels 0/1.

    Returns the parameters from the epoch with the best validation
    accuracy (earliest on ties).
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    val_images = np.asarray(val_images)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    if len(images) == 0:
        raise SentinelError("training split has no labelled tiles")
    if len(val_images) == 0:
        raise SentinelError("validation split has no labelled tiles")
    crop = train_config.crop_size or net_config.crop_size
    if crop != net_config.crop_size:
        raise SentinelError(f"crop size {crop} does not match network input {net_config.crop_size}")
    tile = images.shape[1]

    mean_image = compute_mean_image(images)
    params = init.copy() if init is not None else init_network(net_config, derive_seed(train_config.seed, "init"))
    velocity = params.zeros_like()
    centred = images.astype(np.float64) - mean_image
    n_samples = train_config.samples_per_epoch or len(images)

    best, best_acc, best_epoch, curve = params.copy(), -1.0, 0, []
    for epoch in range(train_config.epochs):
        rng = np.random.default_rng(derive_seed(train_config.seed, "epoch", epoch))
        order = _epoch_order(labels, n_samples, train_config.balanced, rng)
        lr = train_config.lr_at(epoch)
        losses = []
        for s in range(0, len(order), train_config.batch_size):
            idx = order[s:s + train_config.batch_size]
            batch = np.empty((len(idx), crop, crop, images.shape[3]))
            for j, i in enumerate(idx):
                ox, oy, flip = augment_params(tile, crop, rng)
                patch = centred[i, oy:oy + crop, ox:ox + crop]
                batch[j] = patch[:, ::-1] if flip else patch
            loss, grads = loss_and_gradients(params, batch, labels[idx], train_config.weight_decay)
            if not np.isfinite(loss):
                raise NumericFailure(f"training diverged at epoch {epoch}")
            sgd_step(params, grads, velocity, lr, train_config.momentum)
            losses.append(loss * len(idx))
        if not params.all_finite():
            raise NumericFailure(f"parameters became non-finite at epoch {epoch}")
        m = EpochMetrics(
            epoch=epoch,
            train_loss=float(np.sum(losses) / len(order)),
            train_acc=accuracy(params, images, labels, mean_image),
            val_acc=accuracy(params, val_images, val_labels, mean_image),
        )
        curve.append(m)
        log.info("epoch %d loss %.4f train %.3f val %.3f", epoch, m.train_loss, m.train_acc, m.val_acc)
        if m.val_acc > best_acc:
            best, best_acc, best_epoch = params.copy(), m.val_acc, epoch
    return TrainResult(best, mean_image, curve, best_epoch)


def load_split_arrays(store: TileStore, slide_ids) -> tuple[np.ndarray, np.ndarray]:
    records = store.for_slides(slide_ids, labels=(TISSUE, TUMOR))
    if not records:
        return np.zeros((0, 1, 1, 3), np.uint8), np.zeros(0, np.int64)
    images = np.stack([store.image(r) for r in records])
    return images, np.array([LABEL_INDEX[r.label] for r in records], dtype=np.int64)


def train(tile_store: TileStore, split: SplitAssignment, net_config: NetworkConfig, train_config: TrainConfig) -> TrainResult:
    """Train on the tiles of the split's train slides; select on validation slides.

    Tiles in the excluded band are never used.
    """
    x_tr, y_tr = load_split_arrays(tile_store, split.ids("train"))
    x_va, y_va = load_split_arrays(tile_store, split.ids("validation"))
    return fit(x_tr, y_tr, x_va, y_va, net_config, train_config)


def write_metrics(curve: Sequence[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
        for m in curve:
            w.writerow([m.epoch, repr(m.train_loss), repr(m.train_acc), repr(m.val_acc)])
