"""Tumor-probability heatmaps assembled from per-tile predictions.

One heatmap cell per tile-grid position at the tiling level. A cell is
drawn as a ``tile_size / ratio`` pixel square at the output level, i.e.
the level whose downsample is ``ratio`` times that of the tiling level.

Binary layout (little-endian)::

    magic     4s   b"SNHM"
    version   u32
    rows      u32
    cols      u32
    cell_size u32    output-level pixels per cell side
    tile_size u32    tiling-level pixels per cell side
    ratio     u32
    tiling_level i32
    output_level i32 (-1 when the pyramid has no such level)
    sentinel  f32    value of cells never covered by a tile
    id_len    u32, then id_len bytes of UTF-8 slide id
    values    rows*cols f32, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
from matplotlib import colormaps

from .errors import MissingArtifactError, SentinelError
from .slide_io import PyramidalSlide
from .tiles import TileRecord

NO_TISSUE = np.float32(-1.0)
NO_TISSUE_RGB = (128, 128, 128)
MAGIC = b"SNHM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIiif")


@dataclass
class Heatmap:
    values: np.ndarray  # float32 (rows, cols); NO_TISSUE where undefined
    tile_size: int
    ratio: int
    tiling_level: int = 0
    output_level: Optional[int] = None
    slide_id: str = ""

    @property
    def cell_size(self) -> int:
        return self.tile_size // self.ratio

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def defined(self) -> np.ndarray:
        return self.values != NO_TISSUE

    def tile_rect(self, row: int, col: int) -> tuple[int, int, int, int]:
        """Footprint of a cell at the tiling level, ``(x, y, w, h)``."""
        ts = self.tile_size
        return col * ts, row * ts, ts, ts

    def cell_rect(self, row: int, col: int) -> tuple[int, int, int, int]:
        """Footprint of a cell at the output level."""
        cs = self.cell_size
        return col * cs, row * cs, cs, cs

    def to_bytes(self) -> bytes:
        rows, cols = self.values.shape
        sid = self.slide_id.encode("utf-8")
        header = _HEADER.pack(
            MAGIC, VERSION, rows, cols, self.cell_size, self.tile_size, self.ratio,
            self.tiling_level, -1 if self.output_level is None else self.output_level, float(NO_TISSUE),
        )
        body = np.ascontiguousarray(self.values, dtype="<f4").tobytes()
        return header + struct.pack("<I", len(sid)) + sid + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Heatmap":
        magic, version, rows, cols, _cell, tile, ratio, tlevel, olevel, _sent = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC or version != VERSION:
            raise SentinelError("not a heatmap file (bad magic or version)")
        off = _HEADER.size
        (n,) = struct.unpack_from("<I", blob, off)
        sid = blob[off + 4: off + 4 + n].decode("utf-8")
        off += 4 + n
        values = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float32)
        return cls(values, tile, ratio, tlevel, None if olevel < 0 else olevel, sid)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Heatmap":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path, "heatmap")
        return cls.from_bytes(path.read_bytes())


def build_heatmap(
    slide: Union[PyramidalSlide, tuple[int, int]],
    tile_predictions: Iterable[tuple[TileRecord, float]],
    output_downsample_ratio: int = 8,
    tiling_level: Optional[int] = None,
    tile_size: Optional[int] = None,
) -> Heatmap:
    """Place each tile probability into its grid cell.

    ``slide`` may be a slide handle or the ``(width, height)`` of the tiling
    level. Tiles must sit on the ``tile_size`` grid and not repeat. An empty
    prediction list needs explicit ``tile_size`` and ``tiling_level`` and
    yields an all no-tissue map.
    """
    preds = list(tile_predictions)
    if not preds and (tile_size is None or tiling_level is None):
        raise SentinelError("empty predictions need explicit tile_size and tiling_level")
    tile_size = preds[0][0].size if tile_size is None else tile_size
    level = preds[0][0].level if tiling_level is None else tiling_level
    ratio = int(output_downsample_ratio)
    if ratio < 1 or tile_size % ratio:
        raise SentinelError(f"downsample ratio {output_downsample_ratio} does not divide tile size {tile_size}")

    if isinstance(slide, PyramidalSlide):
        lv = slide.level(level)
        width, height = lv.width, lv.height
        output_level = slide.level_for_downsample(lv.downsample * ratio)
        slide_id = slide.slide_id
    else:
        width, height = slide
        output_level, slide_id = None, preds[0][0].slide_id if preds else ""

    rows, cols = -(-height // tile_size), -(-width // tile_size)
    values = np.full((rows, cols), NO_TISSUE, dtype=np.float32)
    for rec, p in preds:
        if rec.size != tile_size or rec.level != level:
            raise SentinelError("all tiles must share size and level")
        if rec.x % tile_size or rec.y % tile_size:
            raise SentinelError(f"tile at ({rec.x},{rec.y}) is off the {tile_size}-pixel grid")
        if not 0.0 <= p <= 1.0:
            raise SentinelError(f"probability {p} outside [0, 1]")
        r, c = rec.y // tile_size, rec.x // tile_size
        if values[r, c] != NO_TISSUE:
            raise SentinelError(f"overlapping tiles at ({rec.x},{rec.y})")
        values[r, c] = p
    return Heatmap(values, tile_size, ratio, level, output_level, slide_id)


def render_heatmap(heatmap: Heatmap, colormap: str = "jet") -> np.ndarray:
    """RGB view: each cell a ``cell_size`` square, p=0 -> colormap min, p=1 -> max.

    Cells without tissue are drawn grey ``(128, 128, 128)``.
    """
    cmap = colormaps[colormap]
    rgba = cmap(np.clip(heatmap.values, 0.0, 1.0).astype(np.float64))
    rgb = np.floor(rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)
    rgb[~heatmap.defined] = NO_TISSUE_RGB
    cs = heatmap.cell_size
    return np.repeat(np.repeat(rgb, cs, axis=0), cs, axis=1)


def render_overlay(heatmap: Heatmap, slide: PyramidalSlide, alpha: float = 0.5, colormap: str = "jet") -> np.ndarray:
    """Alpha-blend the heatmap over the slide at the output level (tissue cells only)."""
    if heatmap.output_level is None:
        raise SentinelError("slide pyramid has no level matching the heatmap resolution")
    base = slide.level_array(heatmap.output_level).astype(np.float64)
    h, w = base.shape[:2]
    colour = render_heatmap(heatmap, colormap)[:h, :w].astype(np.float64)
    mask = np.repeat(np.repeat(heatmap.defined, heatmap.cell_size, 0), heatmap.cell_size, 1)[:h, :w]
    out = base.copy()
    out[mask] = (1 - alpha) * base[mask] + alpha * colour[mask]
    return np.floor(out + 0.5).astype(np.uint8)


def threshold_heatmap(heatmap: Heatmap, t: float) -> np.ndarray:
    """Cells with ``p > t``; no-tissue cells are background."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold {t} outside [0, 1]")
    return heatmap.defined & (heatmap.values > np.float32(t))
