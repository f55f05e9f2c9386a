"""The 28-dimensional slide feature vector computed from a heatmap."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import MissingArtifactError
from ..heatmap import Heatmap, threshold_heatmap
from .regions import extract_regions

GEOMETRY = ("area", "perimeter", "compactness", "rectangularity", "solidity")
MOMENTS = ("max", "mean", "variance", "skewness", "kurtosis")
FEATURE_NAMES = tuple(f"{m}_{g}" for g in GEOMETRY for m in MOMENTS) + (
    "average_prediction",
    "tumor_region_count",
    "count_pixels_p_gt_090",
)
N_FEATURES = len(FEATURE_NAMES)
HIGH_CONFIDENCE = 0.90
DEFAULT_THRESHOLD = 0.5


def moment_stats(values: Sequence[float]) -> tuple[float, float, float, float, float]:
    """``(max, mean, variance, skewness, excess kurtosis)`` with population moments.

    Empty input gives all zeros; constant input (including a singleton)
    gives zero variance, skewness and kurtosis.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        return (0.0, 0.0, 0.0, 0.0, 0.0)
    mean = float(x.mean())
    d = x - mean
    m2 = float(np.mean(d ** 2))
    if m2 <= 1e-24 * max(1.0, mean * mean):
        return (float(x.max()), mean, 0.0, 0.0, 0.0)
    m3 = float(np.mean(d ** 3))
    m4 = float(np.mean(d ** 4))
    return (float(x.max()), mean, m2, m3 / m2 ** 1.5, m4 / m2 ** 2 - 3.0)


@dataclass
class SlideFeatureVector:
    values: np.ndarray

    def __getitem__(self, name: str) -> float:
        return float(self.values[FEATURE_NAMES.index(name)])

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(FEATURE_NAMES, self.values)}


def slide_features(heatmap: Heatmap, threshold: float = DEFAULT_THRESHOLD) -> SlideFeatureVector:
    regions = extract_regions(threshold_heatmap(heatmap, threshold), heatmap.values)
    if not regions:
        return SlideFeatureVector(np.zeros(N_FEATURES))
    geoms = np.array([r.geometry.as_tuple() for r in regions])
    out = []
    for j in range(len(GEOMETRY)):
        out.extend(moment_stats(geoms[:, j]))
    cells = sum(r.area for r in regions)
    out.append(sum(r.probability_sum for r in regions) / cells)
    out.append(float(len(regions)))
    out.append(float(np.count_nonzero(heatmap.defined & (heatmap.values > np.float32(HIGH_CONFIDENCE)))))
    vec = np.array(out, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise ArithmeticError("non-finite slide feature")
    return SlideFeatureVector(vec)


def write_feature_matrix(rows: Iterable[tuple[str, str, np.ndarray]], path) -> None:
    """Columns: slide_id, label, then the 28 feature names."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("slide_id", "label") + FEATURE_NAMES)
        for sid, label, vec in rows:
            w.writerow([sid, label or ""] + [repr(float(v)) for v in vec])


def read_feature_matrix(path) -> tuple[list[str], list[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "features")
    ids, labels, rows = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[2:]) != FEATURE_NAMES:
            raise ValueError("feature matrix header does not match the 28 expected features")
        for row in reader:
            ids.append(row[0])
            labels.append(row[1])
            rows.append([float(v) for v in row[2:]])
    return ids, labels, np.array(rows, dtype=np.float64).reshape(-1, N_FEATURES)
