"""Stain normalization and optical-density colour deconvolution.

Normalization matches per-channel mean and standard deviation in CIELAB
(Reinhard-style colour transfer). Statistics skip background pixels, i.e.
pixels whose 8-bit HSV saturation is below a floor.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from skimage import color as skcolor

from . import FORMAT_VERSION
from .errors import DegenerateInputError, DegenerateStainError
from .segmentation import rgb_to_hsv

COLORSPACE = "cielab"
SATURATION_FLOOR = 20
STD_EPS = 1e-6
MAX_CONDITION = 1e6


def rgb_to_perceptual(tile: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float64 CIELAB (D65)."""
    return skcolor.rgb2lab(np.asarray(tile, dtype=np.uint8))


def perceptual_to_rgb(lab: np.ndarray) -> np.ndarray:
    """CIELAB -> uint8 RGB, clamping out-of-gamut values."""
    with warnings.catch_warnings():
        # lab2rgb warns whenever it clips negative XYZ; clamping is intended here
        warnings.simplefilter("ignore", UserWarning)
        rgb = skcolor.lab2rgb(np.asarray(lab, dtype=np.float64))
    return np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class StainStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    colorspace: str = COLORSPACE

    def __post_init__(self):
        if any(s < 0 for s in self.std):
            raise ValueError("standard deviations must be non-negative")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "colorspace": self.colorspace,
            "mean": list(self.mean),
            "std": list(self.std),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StainStats":
        if doc.get("colorspace", COLORSPACE) != COLORSPACE:
            raise ValueError(f"unsupported stain colorspace {doc['colorspace']!r}")
        return cls(tuple(map(float, doc["mean"])), tuple(map(float, doc["std"])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "StainStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def qualifying_mask(tile: np.ndarray, saturation_floor: int = SATURATION_FLOOR) -> np.ndarray:
    return rgb_to_hsv(tile)[..., 1] >= saturation_floor


def compute_stain_stats(tiles: Iterable[np.ndarray], saturation_floor: int = SATURATION_FLOOR) -> StainStats:
    """Channel-wise Lab mean/std over the non-background pixels of all tiles."""
    chunks = []
    for tile in tiles:
        tile = np.asarray(tile, dtype=np.uint8)
        keep = qualifying_mask(tile, saturation_floor)
        if keep.any():
            chunks.append(rgb_to_perceptual(tile)[keep])
    if not chunks:
        raise DegenerateInputError("no pixels above the saturation floor; cannot estimate stain statistics")
    px = np.concatenate(chunks)
    return StainStats(tuple(px.mean(axis=0).tolist()), tuple(px.std(axis=0).tolist()))


def normalize_lab(lab: np.ndarray, source: StainStats, target: StainStats) -> np.ndarray:
    """Per-channel affine map ``(x - mu_s) * sd_t / sd_s + mu_t`` in Lab."""
    src_std = np.asarray(source.std)
    if np.any(src_std < STD_EPS):
        raise DegenerateStainError(f"source stain std {tuple(src_std)} below {STD_EPS}")
    gain = np.asarray(target.std) / src_std
    return (lab - np.asarray(source.mean)) * gain + np.asarray(target.mean)


def normalize_tile(tile: np.ndarray, source: StainStats, target: StainStats) -> np.ndarray:
    """Map ``tile`` from the ``source`` stain profile onto ``target``.

    Raises:
        DegenerateStainError: if any source channel has (near) zero spread.
    """
    return perceptual_to_rgb(normalize_lab(rgb_to_perceptual(tile), source, target))


# --------------------------------------------------------------------------
# colour deconvolution

class StainMatrix:
    """Three stain optical-density vectors, one per row, each unit length."""

    def __init__(self, rows):
        m = np.asarray(rows, dtype=np.float64).reshape(3, 3)
        norms = np.linalg.norm(m, axis=1)
        if np.any(norms == 0):
            raise DegenerateInputError("stain vectors must be non-zero")
        self.matrix = m / norms[:, None]

    @classmethod
    def identity(cls) -> "StainMatrix":
        return cls(np.eye(3))

    def condition(self) -> float:
        return float(np.linalg.cond(self.matrix))

    def inverse(self) -> np.ndarray:
        cond = self.condition()
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise DegenerateInputError(f"stain matrix is near-singular (condition number {cond:.3g})")
        return np.linalg.inv(self.matrix)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "rows": self.matrix.ravel().tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "StainMatrix":
        return cls(doc["rows"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "StainMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()))


def optical_density(tile: np.ndarray) -> np.ndarray:
    return -np.log10(np.maximum(np.asarray(tile, dtype=np.float64), 1.0) / 255.0)


def od_deconvolve(tile: np.ndarray, matrix: StainMatrix) -> np.ndarray:
    """Per-pixel stain concentrations ``C`` solving ``OD = C @ M``."""
    return optical_density(tile) @ matrix.inverse()


def od_recompose(concentrations: np.ndarray, matrix: StainMatrix) -> np.ndarray:
    od = np.asarray(concentrations) @ matrix.matrix
    return np.clip(np.floor(255.0 * 10.0 ** (-od) + 0.5), 0, 255).astype(np.uint8)


def normalize_or_passthrough(tile: np.ndarray, source: Optional[StainStats], target: StainStats):
    """Normalize, or return ``(tile, False)`` when the source profile is degenerate."""
    if source is None:
        return tile, False
    try:
        return normalize_tile(tile, source, target), True
    except DegenerateStainError:
        return tile, False
