"""Tumor regions of a thresholded heatmap and their shape descriptors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from ..errors import ShapeError
from ..geometry import cell_corners, convex_hull, label_components, min_area_rect, path_length, polygon_area, trace_boundary


@dataclass
class RegionGeometry:
    area: int
    perimeter: float
    compactness: float
    rectangularity: float
    solidity: float

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (float(self.area), self.perimeter, self.compactness, self.rectangularity, self.solidity)


@dataclass
class TumorRegion:
    mask: np.ndarray  # bool crop of the cell grid
    origin: tuple[int, int]  # (x, y) of the crop in grid cells
    geometry: RegionGeometry
    mean_probability: float
    probability_sum: float

    @property
    def area(self) -> int:
        return self.geometry.area


def _clip_unit(v: float) -> float:
    return min(1.0, v)


def region_geometry(mask: np.ndarray) -> RegionGeometry:
    """Shape descriptors of a single 8-connected region on the cell grid.

    Perimeter follows cell centres around the outer boundary (axial step 1,
    diagonal sqrt(2)); hull and minimum rectangle use cell corners, so a
    single cell has hull area 1. Compactness of a one-cell region (zero
    perimeter) is defined as 1.
    """
    mask = np.asarray(mask, dtype=bool)
    area = int(mask.sum())
    if area == 0:
        raise ValueError("region is empty")
    perimeter = path_length(trace_boundary(mask))
    compactness = 1.0 if perimeter == 0 else _clip_unit(4.0 * math.pi * area / perimeter ** 2)
    hull = convex_hull(cell_corners(mask))
    rectangularity = _clip_unit(area / min_area_rect(hull))
    solidity = _clip_unit(area / polygon_area(hull))
    return RegionGeometry(area, perimeter, compactness, rectangularity, solidity)


def extract_regions(thresholded: np.ndarray, raw_values: np.ndarray) -> list[TumorRegion]:
    """8-connected components of ``thresholded``, ordered by first cell in raster order."""
    thresholded = np.asarray(thresholded, dtype=bool)
    raw_values = np.asarray(raw_values)
    if thresholded.shape != raw_values.shape:
        raise ShapeError(f"mask {thresholded.shape} and heatmap {raw_values.shape} differ")
    labels, n = label_components(thresholded, 8)
    regions = []
    for idx, sl in enumerate(ndi.find_objects(labels), start=1):
        if sl is None:
            continue
        crop = labels[sl] == idx
        vals = raw_values[sl][crop].astype(np.float64)
        regions.append(TumorRegion(
            mask=crop,
            origin=(sl[1].start, sl[0].start),
            geometry=region_geometry(crop),
            mean_probability=float(vals.mean()),
            probability_sum=float(vals.sum()),
        ))
    return regions
