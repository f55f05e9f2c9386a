import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import naive_median, otsu_oracle
from sentinel.errors import DegenerateInputError
from sentinel.segmentation import (
    SegmentationParams, load_segmentation, median_blur, otsu_from_histogram, otsu_threshold, rgb_to_hsv,
    save_segmentation, segment_tissue, tissue_foreground,
)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 255), st.integers(1, 50)), min_size=2, max_size=12))
def test_otsu_matches_intra_class_oracle(bins):
    hist = [0] * 256
    for v, c in bins:
        hist[v] += c
    if sum(1 for c in hist if c) < 2:
        return
    assert otsu_from_histogram(hist) == otsu_oracle(hist)


def test_otsu_bimodal():
    img = np.array([10] * 50 + [200] * 50, dtype=np.uint8).reshape(10, 10)
    t, mask = otsu_threshold(img)
    assert 10 <= t < 200
    assert mask.sum() == 50


def test_otsu_constant_raises():
    with pytest.raises(DegenerateInputError):
        otsu_threshold(np.full((4, 4), 7, np.uint8))


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, (9, 11)), st.sampled_from([3, 5]))
def test_median_matches_naive(img, k):
    assert np.array_equal(median_blur(img, k), naive_median(img, k))


def test_median_rejects_even_kernel():
    with pytest.raises(ValueError):
        median_blur(np.zeros((4, 4), np.uint8), 4)


def test_hsv_reference_values():
    px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [0, 255, 255], [128, 128, 128], [0, 0, 0]]], np.uint8)
    hsv = rgb_to_hsv(px)[0]
    assert hsv[:, 0].tolist() == [0, 85, 170, 128, 0, 0]
    assert hsv[:, 1].tolist() == [255, 255, 255, 255, 0, 0]
    assert hsv[:, 2].tolist() == [255, 255, 255, 255, 128, 0]


def test_hsv_saturation_agrees_with_colorsys():
    import colorsys
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, size=(1, 200, 3), dtype=np.uint8)
    sat = rgb_to_hsv(px)[0, :, 1]
    ref = [colorsys.rgb_to_hsv(*(c / 255 for c in p))[1] * 255 for p in px[0].tolist()]
    assert np.max(np.abs(sat - np.array(ref))) <= 0.5 + 1e-9


def test_foreground_guard_on_blank_frame():
    rng = np.random.default_rng(3)
    sat = rng.integers(0, 6, size=(40, 40)).astype(np.uint8)
    _, fg = tissue_foreground(sat, SegmentationParams())
    assert not fg.any()


def test_foreground_guard_on_all_tissue_frame():
    rng = np.random.default_rng(3)
    sat = rng.integers(90, 110, size=(40, 40)).astype(np.uint8)
    _, fg = tissue_foreground(sat, SegmentationParams())
    assert fg.all()


def test_segment_tissue_finds_blobs(tumor_slide):
    res = segment_tissue(tumor_slide)
    assert res.detection_level == 2
    assert 1 <= len(res.contours) <= 2
    assert res.reduction_ratio > 0.5
    # every tissue pixel of level 0 (by saturation) sits in some scaled bbox
    sat = rgb_to_hsv(tumor_slide.level_array(0))[..., 1]
    tissue = median_blur(sat, 7) > 60
    covered = np.zeros_like(tissue)
    for c in res.contours:
        x, y, w, h = c.bbox
        covered[y:y + h, x:x + w] = True
    assert covered[tissue].mean() > 0.99


def test_segmentation_roundtrip(tmp_path, tumor_slide):
    res = segment_tissue(tumor_slide)
    save_segmentation(res, tmp_path)
    back = load_segmentation(tmp_path / f"{res.slide_id}.json")
    assert np.array_equal(back.tissue_mask, res.tissue_mask)
    assert [c.bbox for c in back.contours] == [c.bbox for c in res.contours]
    assert all(np.array_equal(a.boundary, b.boundary) for a, b in zip(back.contours, res.contours))
    assert back.reduction_ratio == res.reduction_ratio


def test_min_area_filter(tumor_slide):
    res = segment_tissue(tumor_slide, SegmentationParams(min_component_area=10 ** 9))
    assert res.contours == []
    assert res.reduction_ratio == 1.0
