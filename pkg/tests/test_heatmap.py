import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sentinel.errors import SentinelError
from sentinel.heatmap import NO_TISSUE, NO_TISSUE_RGB, Heatmap, build_heatmap, render_heatmap, render_overlay, threshold_heatmap
from sentinel.tiles import TileRecord


def rec(x, y, size=256, level=0):
    return TileRecord("s", level, x, y, size)


def test_cell_size_256_ratio_8():
    hm = build_heatmap((1024, 768), [(rec(256, 512), 0.3)], 8)
    assert hm.cell_size == 32
    assert hm.shape == (3, 4)
    assert render_heatmap(hm).shape == (96, 128, 3)


def test_single_tile():
    hm = build_heatmap((1024, 1024), [(rec(512, 256), 1.0)], 8)
    assert hm.values[1, 2] == 1.0
    assert hm.defined.sum() == 1
    assert np.all(hm.values[~hm.defined] == NO_TISSUE)


def test_checkerboard():
    preds = [(rec(256 * c, 256 * r), float((r + c) % 2)) for r in range(4) for c in range(5)]
    hm = build_heatmap((1280, 1024), preds, 8)
    expected = np.indices((4, 5)).sum(axis=0) % 2
    assert np.array_equal(hm.values, expected.astype(np.float32))


def test_errors():
    with pytest.raises(SentinelError):
        build_heatmap((1024, 1024), [(rec(0, 0), 0.5)], 3)
    with pytest.raises(SentinelError):
        build_heatmap((1024, 1024), [(rec(0, 0), 0.5), (rec(0, 0), 0.6)], 8)
    with pytest.raises(SentinelError):
        build_heatmap((1024, 1024), [(rec(10, 0), 0.5)], 8)
    with pytest.raises(SentinelError):
        build_heatmap((1024, 1024), [(rec(0, 0), 1.5)], 8)
    with pytest.raises(SentinelError):
        build_heatmap((1024, 1024), [], 8)


def test_empty_with_explicit_geometry():
    hm = build_heatmap((100, 60), [], 4, tiling_level=0, tile_size=20)
    assert hm.shape == (3, 5) and not hm.defined.any()


def test_render_endpoints_and_gray():
    from matplotlib import colormaps
    hm = build_heatmap((768, 256), [(rec(0, 0), 0.0), (rec(256, 0), 1.0)], 8)
    img = render_heatmap(hm, "jet")
    lo = np.floor(np.array(colormaps["jet"](0.0)[:3]) * 255 + 0.5)
    hi = np.floor(np.array(colormaps["jet"](1.0)[:3]) * 255 + 0.5)
    assert np.array_equal(img[5, 5], lo)
    assert np.array_equal(img[5, 40], hi)
    assert tuple(img[5, 70]) == NO_TISSUE_RGB
    assert np.array_equal(render_heatmap(hm, "jet"), img)


def test_threshold():
    vals = np.array([[0.2, 0.5, 0.9], [-1, 1.0, 0.51]], dtype=np.float32)
    hm = Heatmap(vals, 16, 8)
    assert threshold_heatmap(hm, 0.5).tolist() == [[False, False, True], [False, True, True]]
    assert threshold_heatmap(hm, 0.0).tolist() == [[True, True, True], [False, True, True]]
    assert not threshold_heatmap(hm, 1.0).any()
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            threshold_heatmap(hm, bad)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1, width=32), min_size=12, max_size=12), st.floats(0, 1))
def test_threshold_matches_scan(vals, t):
    arr = np.array(vals, dtype=np.float32).reshape(3, 4)
    arr[0, 0] = NO_TISSUE
    hm = Heatmap(arr, 8, 4)
    mask = threshold_heatmap(hm, t)
    for (r, c), v in np.ndenumerate(arr):
        assert mask[r, c] == (v != -1 and v > np.float32(t))


@settings(max_examples=40)
@given(st.sets(st.tuples(st.integers(0, 7), st.integers(0, 5)), min_size=1, max_size=30),
       st.sampled_from([(64, 2), (64, 8), (256, 8), (32, 32)]))
def test_conservation_and_geometry(cells, geom):
    size, ratio = geom
    preds = [(rec(c * size, r * size, size), 0.5) for c, r in sorted(cells)]
    hm = build_heatmap((8 * size, 6 * size), preds, ratio)
    assert hm.defined.sum() == len(cells)
    for c, r in cells:
        assert hm.tile_rect(r, c) == (c * size, r * size, size, size)
        x, y, w, h = hm.cell_rect(r, c)
        assert (x * ratio, y * ratio, w * ratio, h * ratio) == hm.tile_rect(r, c)


def test_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.random((5, 7)).astype(np.float32)
    vals[0, :3] = NO_TISSUE
    hm = Heatmap(vals, 64, 8, 1, 4, "slide_x")
    hm.save(tmp_path / "h.hmap")
    blob = (tmp_path / "h.hmap").read_bytes()
    assert blob[:4] == b"SNHM"
    back = Heatmap.load(tmp_path / "h.hmap")
    assert back.values.tobytes() == vals.tobytes()
    assert (back.tile_size, back.ratio, back.tiling_level, back.output_level, back.slide_id) == (64, 8, 1, 4, "slide_x")
    with pytest.raises(SentinelError):
        Heatmap.from_bytes(b"XXXX" + blob[4:])


def test_overlay_on_slide(tumor_slide):
    preds = [(TileRecord(tumor_slide.slide_id, 0, 0, 0, 32), 1.0)]
    hm = build_heatmap(tumor_slide, preds, 4)
    assert hm.output_level == 2
    out = render_overlay(hm, tumor_slide)
    base = tumor_slide.level_array(2)
    assert out.shape == base.shape
    assert np.array_equal(out[8:], base[8:])
    assert not np.array_equal(out[:8, :8], base[:8, :8])
