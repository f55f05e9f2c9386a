"""Pyramidal slide container, region reads and a synthetic slide generator.

A slide on disk is a directory holding one lossless PNG per pyramid level,
an optional 1-channel tumor mask registered to level 0, and ``manifest.json``::

    {
      "format_version": 1,
      "slide_id": "slide_000",
      "label": "tumor",                # "normal" | "tumor" | null
      "mask_path": "mask.png",         # relative to the manifest, or null
      "levels": [
        {"index": 0, "width": 960, "height": 960, "downsample": 1.0, "path": "level_0.png"},
        ...
      ],
      "attributes": {...}              # free-form provenance (generator config etc.)
    }
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage as ndi
from skimage import color as skcolor

from . import FORMAT_VERSION
from .errors import BoundsError, ManifestError, SentinelError

MANIFEST_NAME = "manifest.json"
LABELS = ("normal", "tumor")


@dataclass(frozen=True)
class LevelDescriptor:
    index: int
    width: int
    height: int
    downsample: float
    path: str = ""


@dataclass
class SlideManifest:
    slide_id: str
    levels: list[LevelDescriptor]
    mask_path: Optional[str] = None
    label: Optional[str] = None
    attributes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "slide_id": self.slide_id,
            "label": self.label,
            "mask_path": self.mask_path,
            "levels": [asdict(lv) for lv in self.levels],
            "attributes": self.attributes,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SlideManifest":
        try:
            levels = [
                LevelDescriptor(
                    index=int(lv["index"]),
                    width=int(lv["width"]),
                    height=int(lv["height"]),
                    downsample=float(lv["downsample"]),
                    path=str(lv["path"]),
                )
                for lv in doc["levels"]
            ]
            return cls(
                slide_id=str(doc["slide_id"]),
                levels=levels,
                mask_path=doc.get("mask_path"),
                label=doc.get("label"),
                attributes=dict(doc.get("attributes") or {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from exc

    def validate(self) -> None:
        """Check the level invariants that do not need raster access."""
        if not self.levels:
            raise ManifestError("manifest has no levels")
        if [lv.index for lv in self.levels] != list(range(len(self.levels))):
            raise ManifestError("level indices must be 0..n-1 in order")
        if self.levels[0].downsample != 1.0:
            raise ManifestError("level 0 must have downsample 1")
        ds = [lv.downsample for lv in self.levels]
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ManifestError(f"downsamples must strictly increase, got {ds}")
        w0, h0 = self.levels[0].width, self.levels[0].height
        for lv in self.levels[1:]:
            if (lv.width, lv.height) != (round(w0 / lv.downsample), round(h0 / lv.downsample)):
                raise ManifestError(
                    f"level {lv.index} size {lv.width}x{lv.height} inconsistent with downsample {lv.downsample}"
                )
        if self.label is not None and self.label not in LABELS:
            raise ManifestError(f"unknown slide label {self.label!r}")


def write_manifest(manifest: SlideManifest, directory) -> Path:
    path = Path(directory) / MANIFEST_NAME
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def _raster_size(path: Path) -> tuple[int, int]:
    if not path.exists():
        raise ManifestError(f"raster file not found: {path}")
    with Image.open(path) as im:
        return im.size


def _load_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode))
    arr = np.array(arr, dtype=np.uint8)
    arr.setflags(write=False)
    return arr


class PyramidalSlide:
    """Read-only handle on a slide directory.

    Level rasters are decoded on first access and cached as read-only
    arrays, so concurrent readers never observe mutation.
    """

    def __init__(self, manifest: SlideManifest, root: Path):
        self.manifest = manifest
        self.root = Path(root)
        self._cache: dict[int, np.ndarray] = {}

    @property
    def slide_id(self) -> str:
        return self.manifest.slide_id

    @property
    def label(self) -> Optional[str]:
        return self.manifest.label

    @property
    def levels(self) -> list[LevelDescriptor]:
        return self.manifest.levels

    @property
    def level_count(self) -> int:
        return len(self.manifest.levels)

    @property
    def dimensions(self) -> tuple[int, int]:
        lv = self.manifest.levels[0]
        return lv.width, lv.height

    def level(self, index: int) -> LevelDescriptor:
        if not 0 <= index < self.level_count:
            raise BoundsError(f"level {index} out of range 0..{self.level_count - 1}")
        return self.manifest.levels[index]

    def downsample(self, index: int) -> float:
        return self.level(index).downsample

    def level_for_downsample(self, downsample: float) -> Optional[int]:
        for lv in self.levels:
            if math.isclose(lv.downsample, downsample):
                return lv.index
        return None

    def level_array(self, index: int) -> np.ndarray:
        lv = self.level(index)
        arr = self._cache.get(index)
        if arr is None:
            arr = _load_png(self.root / lv.path, "RGB")
            self._cache[index] = arr
        return arr

    @cached_property
    def mask(self) -> Optional[np.ndarray]:
        if self.manifest.mask_path is None:
            return None
        return _load_png(self.root / self.manifest.mask_path, "L")

    def read_region(self, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Return the ``h x w x 3`` uint8 block at ``(x, y)`` of ``level``."""
        lv = self.level(level)
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > lv.width or y + h > lv.height:
            raise BoundsError(
                f"region ({x},{y},{w},{h}) outside level {level} bounds {lv.width}x{lv.height}"
            )
        return self.level_array(level)[y:y + h, x:x + w].copy()


def open_slide(manifest_path) -> PyramidalSlide:
    """Open a slide from its manifest file (or the directory holding it)."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    manifest = SlideManifest.from_dict(doc)
    manifest.validate()
    root = path.parent
    for lv in manifest.levels:
        size = _raster_size(root / lv.path)
        if size != (lv.width, lv.height):
            raise ManifestError(
                f"level {lv.index} raster is {size[0]}x{size[1]} but manifest says {lv.width}x{lv.height}"
            )
    if manifest.mask_path is not None:
        size = _raster_size(root / manifest.mask_path)
        if size != (manifest.levels[0].width, manifest.levels[0].height):
            raise ManifestError(f"mask is {size[0]}x{size[1]}, expected level-0 dimensions")
    return PyramidalSlide(manifest, root)


def round_half_away(v):
    """Round to nearest integer, ties away from zero."""
    v = np.asarray(v, dtype=np.float64)
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def scale_factor(slide: PyramidalSlide, from_level: int, to_level: int) -> float:
    return slide.downsample(from_level) / slide.downsample(to_level)


def scale_point(slide: PyramidalSlide, from_level: int, to_level: int, point) -> tuple[int, int]:
    """Map ``(x, y)`` between levels: multiply by ds(from)/ds(to), round half away."""
    f = scale_factor(slide, from_level, to_level)
    x, y = round_half_away(np.asarray(point, dtype=np.float64) * f)
    return int(x), int(y)


def scale_points(slide: PyramidalSlide, from_level: int, to_level: int, points) -> np.ndarray:
    """Vectorised :func:`scale_point` for an ``(n, 2)`` array."""
    f = scale_factor(slide, from_level, to_level)
    return round_half_away(np.asarray(points, dtype=np.float64) * f)


def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks, rounding to uint8."""
    if factor == 1:
        return image.copy()
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"{w}x{h} image not divisible by {factor}")
    blocks = image.reshape(h // factor, factor, w // factor, factor, *image.shape[2:])
    mean = blocks.astype(np.float64).mean(axis=(1, 3))
    return np.clip(np.floor(mean + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# synthetic slides

@dataclass
class SyntheticSlideConfig:
    """Parameters of one synthetic slide.

    Colours are CIELAB triples. ``stain_scale``/``stain_shift`` apply an
    affine per-channel transform to tissue pixels in Lab space, emulating a
    site-specific stain protocol.
    """

    slide_id: str = "synthetic"
    size: tuple[int, int] = (960, 960)
    n_levels: int = 4
    tissue_blobs: int = 3
    tissue_radius: tuple[float, float] = (90.0, 140.0)
    tumor_blobs: int = 0
    tumor_radius: tuple[float, float] = (40.0, 60.0)
    tumor_fraction: Optional[float] = None
    background_lab: tuple[float, float, float] = (93.0, 0.0, 0.0)
    normal_lab: tuple[float, float, float] = (72.0, 28.0, -6.0)
    tumor_lab: tuple[float, float, float] = (52.0, 34.0, -24.0)
    nucleus_lab: tuple[float, float, float] = (38.0, 22.0, -30.0)
    normal_nuclei_density: float = 0.004
    tumor_nuclei_density: float = 0.02
    noise_std: tuple[float, float, float] = (3.0, 2.0, 2.0)
    background_noise_std: float = 1.0
    stain_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    stain_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSlideConfig":
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {}
        for k, v in doc.items():
            if k not in known:
                raise ValueError(f"unknown synthetic slide field {k!r}")
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


def _wobbly_ellipse(shape, cy, cx, ry, rx, angle, wobble, phase, lobes):
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    reach = max(ry, rx) * (1.0 + wobble) + 1
    y0, y1 = max(0, int(cy - reach)), min(h, int(cy + reach) + 2)
    x0, x1 = max(0, int(cx - reach)), min(w, int(cx + reach) + 2)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = (dx * ca + dy * sa) / rx
    v = (-dx * sa + dy * ca) / ry
    theta = np.arctan2(v, u)
    out[y0:y1, x0:x1] = np.hypot(u, v) <= 1.0 + wobble * np.sin(lobes * theta + phase)
    return out


def _place_tissue(cfg: SyntheticSlideConfig, rng: np.random.Generator) -> np.ndarray:
    w, h = cfg.size
    tissue = np.zeros((h, w), dtype=bool)
    placed = []  # (cy, cx, reach)
    for _ in range(cfg.tissue_blobs):
        for _attempt in range(200):
            ry, rx = rng.uniform(*cfg.tissue_radius, size=2)
            reach = max(ry, rx) * 1.15
            margin = reach + 4
            if 2 * margin >= min(w, h):
                raise SentinelError("tissue blob radius too large for slide")
            cy = rng.uniform(margin, h - margin)
            cx = rng.uniform(margin, w - margin)
            if all(math.hypot(cy - py, cx - px) > reach + pr + 8 for py, px, pr in placed):
                break
        else:
            raise SentinelError("could not place non-overlapping tissue blobs; reduce count or radius")
        blob = _wobbly_ellipse(
            (h, w), cy, cx, ry, rx,
            angle=rng.uniform(0, math.pi),
            wobble=rng.uniform(0.05, 0.15),
            phase=rng.uniform(0, 2 * math.pi),
            lobes=int(rng.integers(2, 5)),
        )
        tissue |= blob
        placed.append((cy, cx, reach))
    return tissue


def _place_tumor(cfg, tissue, radii, rng) -> np.ndarray:
    h, w = tissue.shape
    depth = ndi.distance_transform_edt(tissue)
    tumor = np.zeros_like(tissue)
    for r in radii:
        reach = r * 1.1
        ys, xs = np.nonzero(depth >= reach + 1)
        if ys.size == 0:
            raise SentinelError(
                f"tumor blob of radius {r:.1f} cannot fit inside any tissue blob"
            )
        k = int(rng.integers(ys.size))
        tumor |= _wobbly_ellipse(
            (h, w), ys[k], xs[k], r, r,
            angle=0.0, wobble=rng.uniform(0.0, 0.1),
            phase=rng.uniform(0, 2 * math.pi), lobes=3,
        )
    return tumor & tissue


def _render(cfg: SyntheticSlideConfig, tissue, tumor, rng) -> np.ndarray:
    h, w = tissue.shape
    lab = np.empty((h, w, 3), dtype=np.float64)
    lab[:] = cfg.background_lab
    lab += rng.normal(0.0, cfg.background_noise_std, size=(h, w, 3)) * np.array([1.0, 0.3, 0.3])

    normal = tissue & ~tumor
    noise = rng.normal(0.0, 1.0, size=(h, w, 3)) * np.asarray(cfg.noise_std)
    lab[normal] = np.asarray(cfg.normal_lab) + noise[normal]
    lab[tumor] = np.asarray(cfg.tumor_lab) + noise[tumor]

    # nuclei: 3x3 dark dots seeded at random tissue pixels
    seeds = rng.random((h, w))
    density = np.where(tumor, cfg.tumor_nuclei_density, cfg.normal_nuclei_density)
    nuclei = ndi.binary_dilation((seeds < density) & tissue, structure=np.ones((3, 3), bool)) & tissue
    lab[nuclei] = np.asarray(cfg.nucleus_lab) + noise[nuclei]

    lab[tissue] = lab[tissue] * np.asarray(cfg.stain_scale) + np.asarray(cfg.stain_shift)
    lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
    rgb = skcolor.lab2rgb(lab)
    return np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _save_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path, format="PNG", compress_level=1)


def generate_synthetic_slide(config: SyntheticSlideConfig, output_dir) -> SlideManifest:
    """Render a synthetic slide pyramid, its ground-truth mask and manifest.

    Output is a pure function of ``config`` (including its seed).
    """
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SentinelError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise SentinelError(f"output directory {out} is not writable")

    w, h = config.size
    top = 2 ** (config.n_levels - 1)
    if config.n_levels < 1 or w % top or h % top:
        raise SentinelError(f"slide size {w}x{h} must be divisible by {top}")

    rng = np.random.default_rng(config.seed)
    tissue = _place_tissue(config, rng)

    if config.tumor_blobs > 0:
        if config.tumor_fraction is not None:
            # calibrate radii so that the union hits the requested fraction
            target = config.tumor_fraction * tissue.sum()
            r = math.sqrt(target / (config.tumor_blobs * math.pi))
            radii = [r] * config.tumor_blobs
            state = rng.bit_generator.state
            for _ in range(6):
                trial = np.random.default_rng()
                trial.bit_generator.state = state
                tumor = _place_tumor(config, tissue, radii, trial)
                area = tumor.sum()
                if abs(area - target) <= 0.03 * target:
                    break
                radii = [ri * math.sqrt(target / max(area, 1)) for ri in radii]
            rng = trial
        else:
            radii = list(rng.uniform(*config.tumor_radius, size=config.tumor_blobs))
            tumor = _place_tumor(config, tissue, radii, rng)
    else:
        tumor = np.zeros_like(tissue)

    level0 = _render(config, tissue, tumor, rng)

    levels = []
    for k in range(config.n_levels):
        ds = 2 ** k
        name = f"level_{k}.png"
        _save_png(box_downsample(level0, ds), out / name)
        levels.append(LevelDescriptor(k, w // ds, h // ds, float(ds), name))
    _save_png(np.where(tumor, 255, 0).astype(np.uint8), out / "mask.png")

    manifest = SlideManifest(
        slide_id=config.slide_id,
        levels=levels,
        mask_path="mask.png",
        label="tumor" if tumor.any() else "normal",
        attributes={
            "generator": config.to_dict(),
            "tissue_pixels": int(tissue.sum()),
            "tumor_pixels": int(tumor.sum()),
        },
    )
    write_manifest(manifest, out)
    return manifest


def synthetic_tiles(config: SyntheticSlideConfig, n_per_class: int, tile_size: int, seed: int):
    """Balanced all-tissue tiles rendered with ``config``'s colours and stain.

    Returns ``(images, labels)`` with labels 0 = tissue, 1 = tumor, classes
    interleaved.
    """
    rng = np.random.default_rng(seed)
    full = np.ones((tile_size, tile_size), dtype=bool)
    images, labels = [], []
    for _ in range(n_per_class):
        for label in (0, 1):
            images.append(_render(config, full, full if label else ~full, rng))
            labels.append(label)
    return np.stack(images), np.array(labels, dtype=np.int64)
