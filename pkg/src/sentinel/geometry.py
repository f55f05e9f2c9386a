"""Raster geometry shared by tissue segmentation and tumor-region features.

Coordinates returned by this module are ``(x, y)`` = (column, row).
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage as ndi

# clockwise on screen (y grows downward), starting at west
_MOORE = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]
STRUCTURE = {
    4: ndi.generate_binary_structure(2, 1),
    8: ndi.generate_binary_structure(2, 2),
}


def label_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    if connectivity not in STRUCTURE:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, n = ndi.label(np.asarray(mask, dtype=bool), structure=STRUCTURE[connectivity])
    return labels, n


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Moore-neighbour trace of the outer boundary of a single component.

    ``mask`` must contain exactly one 8-connected component (extra pixels
    are simply never reached). Returns an ``(n, 2)`` int array of ``(x, y)``
    pixel centres in clockwise order, without repeating the start pixel.
    A single pixel yields one point.
    """
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.pad(mask, 1)
    start = (int(ys[0]) + 1, int(xs[0]) + 1)  # raster-first pixel: its west is background
    cur, back = start, 0  # back = index into _MOORE of the background neighbour we came from
    path = [start]
    first_state = None
    for _ in range(8 * mask.size + 8):
        nxt = None
        for k in range(1, 9):
            d = (back + k) % 8
            cand = (cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1])
            if padded[cand]:
                nxt, nd = cand, d
                break
        if nxt is None:
            break  # isolated pixel
        # the neighbour scanned just before nxt is background; re-express it relative to nxt
        prev = (cur[0] + _MOORE[(nd - 1) % 8][0], cur[1] + _MOORE[(nd - 1) % 8][1])
        back = _MOORE.index((prev[0] - nxt[0], prev[1] - nxt[1]))
        state = (cur, nxt)
        if first_state is None:
            first_state = state
        elif state == first_state:
            break
        cur = nxt
        path.append(cur)
    if len(path) > 1 and path[-1] == start:
        path.pop()
    pts = np.array(path, dtype=np.int64) - 1
    return pts[:, ::-1].copy()


def path_length(points: np.ndarray) -> float:
    """Closed-path length with axial steps 1 and diagonal steps sqrt(2)."""
    if len(points) < 2:
        return 0.0
    d = np.abs(np.diff(np.vstack([points, points[:1]]), axis=0))
    diag = int(np.count_nonzero((d[:, 0] == 1) & (d[:, 1] == 1)))
    axial = len(d) - diag
    return axial + diag * math.sqrt(2.0)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise (math axes)."""
    pts = sorted(set(map(tuple, np.asarray(points).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def polygon_area(vertices: np.ndarray) -> float:
    if len(vertices) < 3:
        return 0.0
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def min_area_rect(hull: np.ndarray) -> float:
    """Area of the minimum-area enclosing rectangle (rotating calipers).

    One side of the optimal rectangle is collinear with a hull edge, so it
    suffices to try every edge direction.
    """
    if len(hull) < 3:
        return 0.0
    best = math.inf
    edges = np.roll(hull, -1, axis=0) - hull
    for ex, ey in edges:
        norm = math.hypot(ex, ey)
        if norm == 0:
            continue
        ux, uy = ex / norm, ey / norm
        along = hull[:, 0] * ux + hull[:, 1] * uy
        across = -hull[:, 0] * uy + hull[:, 1] * ux
        area = (along.max() - along.min()) * (across.max() - across.min())
        best = min(best, area)
    return float(best)


def cell_corners(mask: np.ndarray) -> np.ndarray:
    """Corner points of every foreground cell, treating cells as unit squares."""
    ys, xs = np.nonzero(mask)
    offsets = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
    base = np.stack([xs, ys], axis=1)
    return (base[:, None, :] + offsets[None]).reshape(-1, 2)
