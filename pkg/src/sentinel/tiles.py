"""Tiling of tissue contours, ground-truth labeling, splits and tile-level preprocessing."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from PIL import Image
from skimage.draw import polygon as fill_polygon

from . import FORMAT_VERSION
from .errors import BoundsError, MissingArtifactError, SentinelError
from .segmentation import Contour
from .slide_io import PyramidalSlide

TISSUE, TUMOR, EXCLUDED, UNLABELED = "tissue", "tumor", "excluded", "unlabeled"
PARTITIONS = ("train", "validation", "test")
PROPORTIONS = (Fraction(3, 5), Fraction(1, 5), Fraction(1, 5))
MIN_COVERAGE = 0.25
INDEX_COLUMNS = ("slide_id", "level", "x", "y", "size", "label", "tumor_fraction")


@dataclass(frozen=True)
class TileRecord:
    slide_id: str
    level: int
    x: int
    y: int
    size: int = 256
    label: str = UNLABELED
    tumor_fraction: float = 0.0

    @property
    def filename(self) -> str:
        return f"{self.x}_{self.y}.png"

    def sort_key(self):
        return (self.slide_id, self.y, self.x)


def label_for_fraction(fraction: float) -> str:
    if fraction > 0.5:
        return TUMOR
    if fraction == 0.0:
        return TISSUE
    return EXCLUDED


def _coverage_source(slide, contours, level, tissue_mask, mask_level):
    if tissue_mask is not None:
        if mask_level is None:
            raise ValueError("mask_level is required with tissue_mask")
        return np.asarray(tissue_mask, dtype=bool), slide.downsample(level) / slide.downsample(mask_level)
    lv = slide.level(level)
    canvas = np.zeros((lv.height, lv.width), dtype=bool)
    for c in contours:
        pts = c.boundary
        if len(pts) >= 3:
            rr, cc = fill_polygon(pts[:, 1], pts[:, 0], shape=canvas.shape)
            canvas[rr, cc] = True
        canvas[np.clip(pts[:, 1], 0, lv.height - 1), np.clip(pts[:, 0], 0, lv.width - 1)] = True
    return canvas, 1.0


def tile_contours(
    slide: PyramidalSlide,
    contours: Sequence[Contour],
    tile_size: int = 256,
    tissue_mask: Optional[np.ndarray] = None,
    mask_level: Optional[int] = None,
    min_coverage: float = MIN_COVERAGE,
) -> list[TileRecord]:
    """Grid tiles (stride = tile size, anchored at the level origin) inside contour bboxes.

    Only grid cells lying entirely inside a bbox and inside the level are
    considered, and a cell is kept when at least ``min_coverage`` of it is
    tissue. ``tissue_mask`` may live at a coarser ``mask_level``; without
    it, the contour polygons are rasterised at the tiling level.
    """
    if not contours:
        return []
    level = contours[0].level
    if any(c.level != level for c in contours):
        raise ValueError("all contours must live on the same level")
    lv = slide.level(level)
    if tile_size > lv.width or tile_size > lv.height:
        raise BoundsError(f"tile size {tile_size} exceeds level {level} ({lv.width}x{lv.height})")
    mask, f = _coverage_source(slide, contours, level, tissue_mask, mask_level)

    origins = set()
    for c in contours:
        x, y, w, h = c.bbox
        gx0, gy0 = -(-x // tile_size), -(-y // tile_size)
        gx1 = min(x + w, lv.width) // tile_size
        gy1 = min(y + h, lv.height) // tile_size
        for gy in range(gy0, gy1):
            for gx in range(gx0, gx1):
                origins.add((gx * tile_size, gy * tile_size))

    tiles = []
    for ox, oy in sorted(origins, key=lambda o: (o[1], o[0])):
        mx0, my0 = math.floor(ox * f), math.floor(oy * f)
        mx1, my1 = max(math.ceil((ox + tile_size) * f), mx0 + 1), max(math.ceil((oy + tile_size) * f), my0 + 1)
        if mask[my0:my1, mx0:mx1].mean() >= min_coverage:
            tiles.append(TileRecord(slide.slide_id, level, ox, oy, tile_size))
    return tiles


def label_tiles(tiles: Iterable[TileRecord], mask: Optional[np.ndarray], downsample: Union[float, Mapping[int, float]] = 1.0) -> list[TileRecord]:
    """Attach tumor fraction and label from a level-0 ground-truth mask.

    ``downsample`` maps a tile's level to level 0: a single factor, or a
    ``{level: factor}`` mapping.
    """
    if mask is None:
        raise SentinelError("ground-truth mask required for labeling")
    mask = np.asarray(mask) > 0
    out = []
    for t in tiles:
        d = downsample[t.level] if isinstance(downsample, Mapping) else downsample
        x0, y0 = int(round(t.x * d)), int(round(t.y * d))
        s = int(round(t.size * d))
        if x0 + s > mask.shape[1] or y0 + s > mask.shape[0]:
            raise BoundsError(f"tile at ({t.x},{t.y}) falls outside the mask")
        fraction = float(mask[y0:y0 + s, x0:x0 + s].mean())
        out.append(replace(t, tumor_fraction=fraction, label=label_for_fraction(fraction)))
    return out


def downsamples_of(slide: PyramidalSlide) -> dict[int, float]:
    return {lv.index: lv.downsample for lv in slide.levels}


# --------------------------------------------------------------------------
# slide-level split

@dataclass
class SplitAssignment:
    mapping: dict[str, str]
    seed: int
    unit: str = "slide"

    def ids(self, partition: str) -> list[str]:
        return sorted(k for k, v in self.mapping.items() if v == partition)

    def counts(self) -> tuple[int, int, int]:
        return tuple(len(self.ids(p)) for p in PARTITIONS)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "unit": self.unit,
            "seed": self.seed,
            "assignment": dict(sorted(self.mapping.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SplitAssignment":
        return cls(dict(doc["assignment"]), int(doc["seed"]), doc.get("unit", "slide"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SplitAssignment":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path, "tile")
        return cls.from_dict(json.loads(path.read_text()))


def largest_remainder(n: int, weights=PROPORTIONS) -> list[int]:
    quotas = [n * w for w in weights]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _stratified_counts(strata_sizes: list[int]) -> list[list[int]]:
    totals = largest_remainder(sum(strata_sizes))
    quotas = [[n * w for w in PROPORTIONS] for n in strata_sizes]
    alloc = [[math.floor(q) for q in row] for row in quotas]
    need_s = [n - sum(row) for n, row in zip(strata_sizes, alloc)]
    need_p = [totals[p] - sum(row[p] for row in alloc) for p in range(len(PARTITIONS))]
    cells = sorted(
        ((quotas[s][p] - alloc[s][p], s, p) for s in range(len(strata_sizes)) for p in range(len(PARTITIONS))),
        key=lambda c: (-c[0], c[1], c[2]),
    )
    for _ in range(2):  # second pass only matters if the first gets stuck
        for _rem, s, p in cells:
            if need_s[s] > 0 and need_p[p] > 0:
                alloc[s][p] += 1
                need_s[s] -= 1
                need_p[p] -= 1
    return alloc


def split_dataset(slide_ids: Sequence[str], seed: int, labels: Optional[Mapping[str, Optional[str]]] = None) -> SplitAssignment:
    """60/20/20 slide-level split, stratified by label when labels are given."""
    ids = sorted(set(slide_ids))
    if len(ids) < 5:
        raise ValueError(f"need at least 5 slides for a 60-20-20 split, got {len(ids)}")
    labels = labels or {}
    strata: dict[str, list[str]] = {}
    for sid in ids:
        strata.setdefault(str(labels.get(sid)), []).append(sid)
    keys = sorted(strata)
    alloc = _stratified_counts([len(strata[k]) for k in keys])
    rng = np.random.default_rng(seed)
    mapping = {}
    for key, counts in zip(keys, alloc):
        members = [strata[key][i] for i in rng.permutation(len(strata[key]))]
        start = 0
        for part, n in zip(PARTITIONS, counts):
            for sid in members[start:start + n]:
                mapping[sid] = part
            start += n
    return SplitAssignment(mapping, seed)


# --------------------------------------------------------------------------
# tile preprocessing

def compute_mean_image(train_tiles: Iterable[np.ndarray]) -> np.ndarray:
    total, n, shape = None, 0, None
    for tile in train_tiles:
        tile = np.asarray(tile)
        if shape is None:
            shape = tile.shape
            total = np.zeros(shape, dtype=np.float64)
        elif tile.shape != shape:
            raise ValueError(f"mixed tile sizes: {tile.shape} vs {shape}")
        total += tile
        n += 1
    if n == 0:
        raise ValueError("mean image needs at least one tile")
    return total / n


def augment_params(tile_size: int, crop_size: int, rng: np.random.Generator) -> tuple[int, int, bool]:
    if crop_size > tile_size:
        raise ValueError(f"crop {crop_size} larger than tile {tile_size}")
    span = tile_size - crop_size + 1
    ox, oy = (int(v) for v in rng.integers(0, span, size=2))
    return ox, oy, bool(rng.random() < 0.5)


def augment(tile_image: np.ndarray, crop_size: int, seed) -> np.ndarray:
    """Random ``crop_size`` square crop plus a coin-flip horizontal reflection.

    ``seed`` is an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = tile_image.shape[:2]
    if h != w:
        raise ValueError("tiles must be square")
    ox, oy, flip = augment_params(h, crop_size, rng)
    crop = tile_image[oy:oy + crop_size, ox:ox + crop_size]
    return crop[:, ::-1] if flip else crop


def center_crop(tile_image: np.ndarray, crop_size: int) -> np.ndarray:
    h, w = tile_image.shape[:2]
    if crop_size > min(h, w):
        raise ValueError(f"crop {crop_size} larger than tile {h}x{w}")
    oy, ox = (h - crop_size) // 2, (w - crop_size) // 2
    return tile_image[oy:oy + crop_size, ox:ox + crop_size]


# --------------------------------------------------------------------------
# tile store: <root>/<slide_id>/<x>_<y>.png + <root>/index.csv

def write_index(records: Iterable[TileRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDEX_COLUMNS)
        for r in sorted(records, key=TileRecord.sort_key):
            writer.writerow([r.slide_id, r.level, r.x, r.y, r.size, r.label, repr(float(r.tumor_fraction))])


def read_index(path) -> list[TileRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "tile")
    with open(path, newline="") as fh:
        return [
            TileRecord(row["slide_id"], int(row["level"]), int(row["x"]), int(row["y"]),
                       int(row["size"]), row["label"], float(row["tumor_fraction"]))
            for row in csv.DictReader(fh)
        ]


def write_tiles(slide: PyramidalSlide, records: Sequence[TileRecord], root) -> None:
    out = Path(root) / slide.slide_id
    out.mkdir(parents=True, exist_ok=True)
    for r in records:
        img = slide.read_region(r.level, r.x, r.y, r.size, r.size)
        Image.fromarray(img).save(out / r.filename, format="PNG", compress_level=1)


class TileStore:
    """Read side of a tile directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.records = read_index(self.root / "index.csv")

    def image(self, record: TileRecord) -> np.ndarray:
        with Image.open(self.root / record.slide_id / record.filename) as im:
            return np.asarray(im.convert("RGB"))

    def for_slides(self, slide_ids: Iterable[str], labels: Optional[Sequence[str]] = None) -> list[TileRecord]:
        wanted = set(slide_ids)
        return [
            r for r in self.records
            if r.slide_id in wanted and (labels is None or r.label in labels)
        ]
