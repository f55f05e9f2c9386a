"""Tissue segmentation on a slide thumbnail.

Chain: RGB -> HSV -> saturation -> median blur -> Otsu -> connected
components -> traced outer contours, then contours are rescaled to the
level used for tiling.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

from . import FORMAT_VERSION
from .errors import DegenerateInputError, SentinelError
from .geometry import label_components, trace_boundary
from .slide_io import PyramidalSlide, round_half_away, scale_factor, scale_points


@dataclass
class SegmentationParams:
    blur_kernel: int = 7
    min_component_area: int = 256
    connectivity: int = 8
    # saturation below which a pixel can never count as tissue
    saturation_floor: int = 20

    def __post_init__(self):
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError(f"blur_kernel must be an odd integer >= 1, got {self.blur_kernel}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")


@dataclass
class Contour:
    """One connected tissue component.

    ``bbox`` is ``(x, y, w, h)`` and ``boundary`` an ``(n, 2)`` array of
    ``(x, y)`` points, both in the pixel grid of ``level``.
    """

    component_id: int
    pixel_count: int
    boundary: np.ndarray
    bbox: tuple[int, int, int, int]
    level: int

    def to_dict(self) -> dict:
        return {
            "component_id": self.component_id,
            "pixel_count": self.pixel_count,
            "bbox": list(self.bbox),
            "polygon": self.boundary.tolist(),
            "level": self.level,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Contour":
        return cls(
            component_id=int(doc["component_id"]),
            pixel_count=int(doc["pixel_count"]),
            boundary=np.asarray(doc["polygon"], dtype=np.int64).reshape(-1, 2),
            bbox=tuple(int(v) for v in doc["bbox"]),
            level=int(doc["level"]),
        )


@dataclass
class SegmentationResult:
    slide_id: str
    detection_level: int
    tiling_level: int
    threshold: Optional[int]
    tissue_mask: np.ndarray  # detection level, kept components only
    detection_contours: list[Contour]
    contours: list[Contour]  # at tiling level
    reduction_ratio: float
    params: SegmentationParams = field(default_factory=SegmentationParams)


def _round(v):
    return round_half_away(v)


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """8-bit HSV; hue is rescaled from degrees to 0..255."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got shape {image.shape}")
    rgb = image.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    delta = mx - mn
    safe = np.where(delta == 0, 1.0, delta)
    hue = np.select(
        [delta == 0, mx == r, mx == g],
        [0.0, ((g - b) / safe) % 6.0, (b - r) / safe + 2.0],
        default=(r - g) / safe + 4.0,
    ) * 60.0
    sat = np.where(mx == 0, 0.0, delta / np.where(mx == 0, 1.0, mx))
    out = np.empty(image.shape, dtype=np.uint8)
    out[..., 0] = np.clip(_round(hue / 360.0 * 255.0), 0, 255)
    out[..., 1] = np.clip(_round(sat * 255.0), 0, 255)
    out[..., 2] = mx.astype(np.uint8)
    return out


def median_blur(channel: np.ndarray, kernel: int) -> np.ndarray:
    """Median filter with edge replication at the borders."""
    channel = np.asarray(channel)
    if channel.ndim != 2:
        raise ValueError("median_blur expects a single channel")
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"median kernel must be odd, got {kernel}")
    if kernel == 1:
        return channel.copy()
    return ndi.median_filter(channel, size=kernel, mode="nearest")


def otsu_threshold(channel: np.ndarray) -> tuple[int, np.ndarray]:
    """Otsu's threshold over the 256-bin histogram.

    Returns ``(t, mask)`` where ``mask = channel > t``. The between-class
    variance is compared in exact integer arithmetic; ties resolve to the
    smallest threshold.
    """
    channel = np.asarray(channel)
    hist = np.bincount(channel.astype(np.uint8).ravel(), minlength=256)
    t = otsu_from_histogram(hist)
    return t, channel > t


def otsu_from_histogram(hist) -> int:
    counts = [int(c) for c in hist]
    if len(counts) != 256:
        raise ValueError("histogram must have 256 bins")
    nonzero = [i for i, c in enumerate(counts) if c]
    if len(nonzero) < 2:
        raise DegenerateInputError("Otsu threshold undefined for a constant image")
    total = sum(counts)
    total_sum = sum(i * c for i, c in enumerate(counts))
    best_t, best_num, best_den = None, -1, 1
    n0 = s0 = 0
    for t in range(nonzero[0], nonzero[-1]):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total - n0
        # between-class variance ~ (total_sum*n0 - total*s0)^2 / (n0*n1)
        num = (total_sum * n0 - total * s0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def find_tissue_contours(mask: np.ndarray, params: SegmentationParams, level: int = 0) -> list[Contour]:
    labels, n = label_components(mask, params.connectivity)
    contours = []
    if n == 0:
        return contours
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    for idx, sl in enumerate(ndi.find_objects(labels), start=1):
        if sl is None or sizes[idx] < params.min_component_area:
            continue
        crop = labels[sl] == idx
        y0, x0 = sl[0].start, sl[1].start
        boundary = trace_boundary(crop) + np.array([x0, y0])
        contours.append(Contour(
            component_id=len(contours),
            pixel_count=int(sizes[idx]),
            boundary=boundary,
            bbox=(int(x0), int(y0), int(crop.shape[1]), int(crop.shape[0])),
            level=level,
        ))
    return contours


def scale_contour(slide: PyramidalSlide, contour: Contour, to_level: int) -> Contour:
    """Rescale a contour; the bbox is widened outward so it always contains the source."""
    f = scale_factor(slide, contour.level, to_level)
    x, y, w, h = contour.bbox
    x0, y0 = math.floor(x * f), math.floor(y * f)
    x1, y1 = math.ceil((x + w) * f), math.ceil((y + h) * f)
    return Contour(
        component_id=contour.component_id,
        pixel_count=contour.pixel_count,
        boundary=scale_points(slide, contour.level, to_level, contour.boundary),
        bbox=(x0, y0, x1 - x0, y1 - y0),
        level=to_level,
    )


def tissue_foreground(saturation: np.ndarray, params: SegmentationParams) -> tuple[Optional[int], np.ndarray]:
    """Blur + Otsu on a saturation channel, guarded for one-class frames.

    When the frame holds only background or only tissue, Otsu splits sensor
    noise. The saturation floor catches both cases: if the lower Otsu class
    is itself above the floor the whole frame is tissue-coloured, and pixels
    under the floor are never tissue.
    """
    blurred = median_blur(saturation, params.blur_kernel)
    floor = params.saturation_floor
    try:
        t, fg = otsu_threshold(blurred)
    except DegenerateInputError:
        return None, blurred >= floor
    low = blurred[~fg]
    if low.size and low.mean() >= floor:
        return t, blurred >= floor
    return t, fg & (blurred >= floor)


def segment_tissue(
    slide: PyramidalSlide,
    params: Optional[SegmentationParams] = None,
    tiling_level: int = 0,
) -> SegmentationResult:
    params = params or SegmentationParams()
    if slide.level_count < 2:
        raise SentinelError("segmentation needs a slide with at least two levels")
    detection_level = slide.level_count - 1
    slide.level(tiling_level)
    thumb = slide.level_array(detection_level)
    t, fg = tissue_foreground(rgb_to_hsv(thumb)[..., 1], params)
    contours = find_tissue_contours(fg, params, level=detection_level)

    labels, _ = label_components(fg, params.connectivity)
    kept = np.zeros_like(fg)
    for c in contours:
        x, y, w, h = c.bbox
        sub = labels[y:y + h, x:x + w]
        # every pixel in a component shares its label; pick it up from the first boundary point
        bx, by = c.boundary[0]
        kept[y:y + h, x:x + w] |= sub == labels[by, bx]

    scaled = [scale_contour(slide, c, tiling_level) for c in contours]
    lv = slide.level(tiling_level)
    covered = sum(c.bbox[2] * c.bbox[3] for c in scaled)
    ratio = 1.0 - covered / float(lv.width * lv.height)
    return SegmentationResult(
        slide_id=slide.slide_id,
        detection_level=detection_level,
        tiling_level=tiling_level,
        threshold=t,
        tissue_mask=kept,
        detection_contours=contours,
        contours=scaled,
        reduction_ratio=ratio,
        params=params,
    )


def save_segmentation(result: SegmentationResult, directory, stem: Optional[str] = None) -> Path:
    """Write ``<stem>.json`` (contours) and ``<stem>_tissue.png`` (detection-level mask)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or result.slide_id
    mask_name = f"{stem}_tissue.png"
    Image.fromarray(np.where(result.tissue_mask, 255, 0).astype(np.uint8)).save(
        directory / mask_name, format="PNG"
    )
    doc = {
        "format_version": FORMAT_VERSION,
        "slide_id": result.slide_id,
        "detection_level": result.detection_level,
        "level": result.tiling_level,
        "threshold": result.threshold,
        "reduction_ratio": result.reduction_ratio,
        "params": vars(result.params),
        "tissue_mask": mask_name,
        "contours": [c.to_dict() for c in result.contours],
        "detection_contours": [c.to_dict() for c in result.detection_contours],
    }
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_segmentation(path) -> SegmentationResult:
    path = Path(path)
    doc = json.loads(path.read_text())
    with Image.open(path.parent / doc["tissue_mask"]) as im:
        mask = np.asarray(im.convert("L")) > 0
    return SegmentationResult(
        slide_id=doc["slide_id"],
        detection_level=int(doc["detection_level"]),
        tiling_level=int(doc["level"]),
        threshold=doc["threshold"],
        tissue_mask=mask,
        detection_contours=[Contour.from_dict(c) for c in doc["detection_contours"]],
        contours=[Contour.from_dict(c) for c in doc["contours"]],
        reduction_ratio=float(doc["reduction_ratio"]),
        params=SegmentationParams(**doc["params"]),
    )
