from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sentinel.errors import BoundsError
from sentinel.segmentation import segment_tissue
from sentinel.tiles import (
    SplitAssignment, TileRecord, TileStore, augment, center_crop, compute_mean_image, downsamples_of,
    label_for_fraction, label_tiles, largest_remainder, read_index, split_dataset, tile_contours,
    write_index, write_tiles,
)


@pytest.mark.parametrize("f,label", [(0.0, "tissue"), (0.5, "excluded"), (0.5000001, "tumor"), (1e-9, "excluded"), (1.0, "tumor")])
def test_label_rule(f, label):
    assert label_for_fraction(f) == label


@pytest.fixture(scope="module")
def seg(tumor_slide):
    return segment_tissue(tumor_slide)


def test_tiles_on_global_grid_inside_bboxes(tumor_slide, seg):
    tiles = tile_contours(tumor_slide, seg.contours, 32, seg.tissue_mask, seg.detection_level)
    assert tiles
    for t in tiles:
        assert t.x % 32 == 0 and t.y % 32 == 0
        assert any(c.bbox[0] <= t.x and c.bbox[1] <= t.y and t.x + 32 <= c.bbox[0] + c.bbox[2]
                   and t.y + 32 <= c.bbox[1] + c.bbox[3] for c in seg.contours)
    assert len({(t.x, t.y) for t in tiles}) == len(tiles)
    assert tiles == sorted(tiles, key=lambda t: (t.y, t.x))


def test_coverage_filter_monotone(tumor_slide, seg):
    counts = [len(tile_contours(tumor_slide, seg.contours, 32, seg.tissue_mask, seg.detection_level, c))
              for c in (0.0, 0.25, 0.75, 1.0)]
    assert counts == sorted(counts, reverse=True)


def test_polygon_fallback_close_to_mask(tumor_slide, seg):
    a = tile_contours(tumor_slide, seg.contours, 32, seg.tissue_mask, seg.detection_level)
    b = tile_contours(tumor_slide, seg.contours, 32)
    assert abs(len(a) - len(b)) <= 0.2 * len(a)


def test_oversized_tile(tumor_slide, seg):
    with pytest.raises(BoundsError):
        tile_contours(tumor_slide, seg.contours, 1000)


def test_labels_match_mask(tumor_slide, seg):
    tiles = tile_contours(tumor_slide, seg.contours, 16, seg.tissue_mask, seg.detection_level)
    labeled = label_tiles(tiles, tumor_slide.mask, downsamples_of(tumor_slide))
    c = Counter(t.label for t in labeled)
    assert c["tumor"] > 0 and c["tissue"] > 0
    m = tumor_slide.mask > 0
    for t in labeled:
        assert t.tumor_fraction == m[t.y:t.y + 16, t.x:t.x + 16].mean()


def test_label_at_coarser_level():
    mask = np.zeros((8, 8), np.uint8)
    mask[:4, :4] = 255
    t = label_tiles([TileRecord("s", 1, 0, 0, 2), TileRecord("s", 1, 2, 0, 2)], mask, {1: 2.0})
    assert [r.label for r in t] == ["tumor", "tissue"]


def test_index_and_store_roundtrip(tmp_path, tumor_slide, seg):
    tiles = label_tiles(tile_contours(tumor_slide, seg.contours, 32, seg.tissue_mask, seg.detection_level),
                        tumor_slide.mask, downsamples_of(tumor_slide))
    write_tiles(tumor_slide, tiles, tmp_path)
    write_index(tiles, tmp_path / "index.csv")
    assert read_index(tmp_path / "index.csv") == tiles
    store = TileStore(tmp_path)
    t = tiles[0]
    assert np.array_equal(store.image(t), tumor_slide.read_region(0, t.x, t.y, 32, 32))
    assert store.for_slides(["other"]) == []


def test_largest_remainder_examples():
    assert largest_remainder(270) == [162, 54, 54]
    assert largest_remainder(40) == [24, 8, 8]
    assert largest_remainder(7) == [4, 2, 1]


@given(st.integers(0, 500))
def test_largest_remainder_sums(n):
    c = largest_remainder(n)
    assert sum(c) == n
    assert all(abs(ci - n * w) < 1 for ci, w in zip(c, (0.6, 0.2, 0.2)))


@settings(max_examples=40)
@given(st.integers(5, 60), st.integers(0, 10 ** 6), st.floats(0.2, 0.8))
def test_split_partitions(n, seed, frac):
    ids = [f"s{i:03d}" for i in range(n)]
    labels = {sid: "tumor" if i < round(n * frac) else "normal" for i, sid in enumerate(ids)}
    split = split_dataset(ids, seed, labels)
    assert sorted(split.mapping) == ids
    assert list(split.counts()) == largest_remainder(n)
    assert split_dataset(list(reversed(ids)), seed, labels).mapping == split.mapping


def test_split_keeps_both_labels():
    ids = [f"s{i}" for i in range(10)]
    labels = {sid: "tumor" if i < 4 else "normal" for i, sid in enumerate(ids)}
    split = split_dataset(ids, 0, labels)
    assert split.counts() == (6, 2, 2)
    for part in ("train", "validation", "test"):
        assert {labels[s] for s in split.ids(part)} == {"tumor", "normal"}


def test_split_needs_five():
    with pytest.raises(ValueError):
        split_dataset(["a", "b", "c", "d"], 0)


def test_split_roundtrip(tmp_path):
    s = split_dataset([f"x{i}" for i in range(9)], 3)
    s.save(tmp_path / "split.json")
    assert SplitAssignment.load(tmp_path / "split.json") == s


def test_mean_image_and_crops():
    a = np.zeros((4, 4, 3), np.uint8)
    b = np.full((4, 4, 3), 2, np.uint8)
    assert np.array_equal(compute_mean_image([a, b]), np.ones((4, 4, 3)))
    tile = np.arange(36).reshape(6, 6)[..., None]
    assert center_crop(tile, 2)[:, :, 0].tolist() == [[14, 15], [20, 21]]


@given(st.integers(0, 2 ** 32 - 1))
def test_augment_is_a_crop_or_mirrored_crop(seed):
    tile = np.arange(100).reshape(10, 10)[..., None]
    out = augment(tile, 6, seed)[..., 0]
    assert np.array_equal(out, augment(tile, 6, seed)[..., 0])
    assert out.shape == (6, 6)
    rows = out[:, 0] // 10
    assert np.all(np.diff(rows) == 1)
    step = np.diff(out[0])
    assert np.all(step == 1) or np.all(step == -1)
