import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import flood_fill_count, pairwise_auc
from sentinel.errors import SentinelError, ShapeError
from sentinel.heatmap import NO_TISSUE, Heatmap
from sentinel.slide_eval import (
    FEATURE_NAMES, ForestConfig, ForestModel, auc_rank, evaluate, extract_regions, fit_tree, moment_stats,
    predict_forest, region_geometry, roc_points, slide_features, train_forest, trapezoid_auc,
)
from sentinel.slide_eval.features import read_feature_matrix, write_feature_matrix


def square(n, pad=1):
    m = np.zeros((n + 2 * pad, n + 2 * pad), bool)
    m[pad:pad + n, pad:pad + n] = True
    return m


def disk(r):
    yy, xx = np.mgrid[-r - 1:r + 2, -r - 1:r + 2]
    return xx ** 2 + yy ** 2 <= r * r


def cross():
    m = np.zeros((3, 3), bool)
    m[1, :] = m[:, 1] = True
    return m


def test_square_geometry():
    g = region_geometry(square(10))
    assert g.area == 100
    assert g.perimeter == 36
    assert g.rectangularity == 1.0 and g.solidity == 1.0


def test_disk_vs_bar():
    d = region_geometry(disk(20))
    bar = region_geometry(np.ones((1, 100), bool))
    assert d.compactness >= 0.85
    assert d.compactness > bar.compactness


def test_cross_not_solid():
    assert region_geometry(cross()).solidity < 1


def test_single_cell_conventions():
    g = region_geometry(np.ones((1, 1), bool))
    assert (g.area, g.perimeter, g.compactness, g.rectangularity, g.solidity) == (1, 0.0, 1.0, 1.0, 1.0)


@settings(max_examples=60)
@given(arrays(bool, (9, 9)))
def test_geometry_invariants(mask):
    lab, _ = __import__("sentinel.geometry", fromlist=["x"]).label_components(mask, 8)
    if not mask.any():
        return
    region = lab == lab[mask][0]
    g = region_geometry(region)
    assert 0 < g.compactness <= 1 and 0 < g.rectangularity <= 1 and 0 < g.solidity <= 1
    shifted = np.pad(region, ((3, 0), (5, 2)))
    assert region_geometry(shifted).as_tuple() == g.as_tuple()
    for k in (1, 2, 3):
        assert np.allclose(region_geometry(np.rot90(region, k)).as_tuple(), g.as_tuple(), rtol=0, atol=1e-9)


def test_extract_regions():
    assert extract_regions(np.zeros((4, 4), bool), np.zeros((4, 4))) == []
    m = np.zeros((8, 8), bool)
    m[0:2, 0:2] = True
    m[4:7, 4:7] = True
    regions = extract_regions(m, np.where(m, 0.8, 0.0))
    assert [r.area for r in regions] == [4, 9]
    assert all(math.isclose(r.mean_probability, 0.8, rel_tol=1e-6) for r in regions)
    with pytest.raises(ShapeError):
        extract_regions(m, np.zeros((7, 8)))


@settings(max_examples=50)
@given(arrays(bool, (10, 10)))
def test_region_count_matches_flood_fill(m):
    regions = extract_regions(m, m.astype(float))
    assert len(regions) == flood_fill_count(m, 8)
    assert sum(r.area for r in regions) == m.sum()


def test_moment_conventions():
    assert moment_stats([5, 5, 5]) == (5, 5, 0, 0, 0)
    assert moment_stats([]) == (0, 0, 0, 0, 0)
    assert moment_stats([7]) == (7, 7, 0, 0, 0)
    mx, mean, var, skew, _ = moment_stats([1, 2, 3, 4, 5])
    assert (mx, mean, var) == (5, 3, 2) and abs(skew) < 1e-12


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_moments_match_scipy(vals):
    from scipy import stats
    x = np.array(vals)
    got = moment_stats(x)
    if np.ptp(x) < 1e-6 * max(1.0, np.abs(x).max()):
        return
    assert math.isclose(got[2], np.var(x), rel_tol=1e-9, abs_tol=1e-9)
    assert math.isclose(got[3], stats.skew(x), rel_tol=1e-6, abs_tol=1e-6)
    assert math.isclose(got[4], stats.kurtosis(x), rel_tol=1e-6, abs_tol=1e-6)


def hm_from(vals):
    return Heatmap(np.asarray(vals, dtype=np.float32), 16, 8)


def test_features_no_tissue():
    f = slide_features(hm_from(np.full((6, 6), NO_TISSUE)))
    assert len(f.values) == 28 == len(FEATURE_NAMES)
    assert not f.values.any()


def test_features_block():
    v = np.full((10, 10), 0.1, np.float32)
    v[2:6, 3:7] = 0.95
    f = slide_features(hm_from(v))
    assert f["tumor_region_count"] == 1
    assert f["count_pixels_p_gt_090"] == 16
    assert f["max_area"] == 16
    assert math.isclose(f["average_prediction"], 0.95, rel_tol=1e-6)
    assert f["variance_area"] == 0


def test_exactly_090_not_counted():
    v = np.full((4, 4), 0.9, np.float32)
    assert slide_features(hm_from(v))["count_pixels_p_gt_090"] == 0


def test_feature_matrix_roundtrip(tmp_path):
    rows = [("a", "tumor", np.arange(28, dtype=float) / 7), ("b", "normal", np.zeros(28))]
    write_feature_matrix(rows, tmp_path / "f.csv")
    header = (tmp_path / "f.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["slide_id", "label"] and tuple(header[2:]) == FEATURE_NAMES
    ids, labels, X = read_feature_matrix(tmp_path / "f.csv")
    assert ids == ["a", "b"] and labels == ["tumor", "normal"]
    assert np.array_equal(X[0], rows[0][2])


def test_forest_separable():
    x = np.linspace(0, 1, 30)[:, None]
    y = (x[:, 0] > 0.5).astype(int)
    model = train_forest(x, y, ForestConfig(n_trees=10, seed=1))
    assert np.array_equal((model.predict_proba(x) >= 0.5).astype(int), y)


def test_forest_determinism_and_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(30, 28)), rng.integers(0, 2, 30)
    a = train_forest(X, y, ForestConfig(n_trees=15, seed=4))
    b = train_forest(X, y, ForestConfig(n_trees=15, seed=4), workers=2)
    assert a.dumps() == b.dumps()
    a.save(tmp_path / "f.json")
    assert ForestModel.load(tmp_path / "f.json").dumps() == a.dumps()
    assert train_forest(X, y, ForestConfig(n_trees=15, seed=5)).dumps() != a.dumps()


def test_forest_errors():
    with pytest.raises(SentinelError):
        train_forest(np.zeros((4, 2)), [1, 1, 1, 1])
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)
    model = train_forest(np.eye(4, 28), [0, 1, 0, 1], ForestConfig(n_trees=3))
    with pytest.raises(ShapeError):
        predict_forest(model, np.zeros(27))


def test_single_tree_matches_cart():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(40, 5)), rng.integers(0, 2, 40)
    forest = train_forest(X, y, ForestConfig(n_trees=1, bootstrap=False, max_features=None))
    tree = fit_tree(X, y)
    Xt = rng.normal(size=(100, 5))
    assert np.array_equal(forest.votes(Xt)[:, 0], tree.predict(Xt))
    assert set(np.unique(forest.predict_proba(Xt))) <= {0.0, 1.0}


def test_vote_fraction():
    x = np.linspace(0, 1, 20)[:, None]
    y = (x[:, 0] > 0.5).astype(int)
    model = train_forest(x, y, ForestConfig(n_trees=10, seed=0))
    assert predict_forest(model, np.array([0.51])) == model.votes(np.array([[0.51]]))[0].sum() / 10
    for i, t in enumerate(model.trees):  # force 7 tumor votes, 3 normal
        t.value = [1.0 if i < 7 else 0.0] * len(t.value)
    assert predict_forest(model, np.array([0.3])) == pytest.approx(0.7)


def test_gini_split_finds_best_threshold():
    X = np.array([[1.0], [2.0], [3.0], [10.0], [11.0]])
    tree = fit_tree(X, [0, 0, 0, 1, 1])
    assert tree.feature[0] == 0 and tree.threshold[0] == 6.5


def test_evaluate_separated():
    r = evaluate([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], 0.5)
    assert (r.auc, r.sensitivity, r.specificity) == (1.0, 1.0, 1.0)
    assert evaluate([0.4] * 4, [0, 1, 0, 1]).auc == 0.5


def test_evaluate_single_class():
    with pytest.raises(SentinelError):
        evaluate([0.1, 0.2], [1, 1])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0, 0.3, 0.6]), st.integers(0, 1)), min_size=2, max_size=25))
def test_auc_oracles(pairs):
    s, y = zip(*pairs)
    if len(set(y)) < 2:
        return
    ref = pairwise_auc(s, y)
    assert abs(auc_rank(s, y) - ref) < 1e-9
    pts = roc_points(s, y)
    assert abs(trapezoid_auc(pts) - ref) < 1e-9
    fpr, tpr = [p[0] for p in pts], [p[1] for p in pts]
    assert fpr == sorted(fpr) and tpr == sorted(tpr) and pts[-1][:2] == (1.0, 1.0)


def test_report_files(tmp_path):
    r = evaluate([0.1, 0.7, 0.4, 0.9], ["normal", "normal", "tumor", "tumor"])
    r.save(tmp_path / "r.json", roc_table=tmp_path / "roc.csv")
    import json
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["format_version"] == 1 and doc["auc"] == 0.75
    assert (tmp_path / "roc.csv").read_text().startswith("fpr,tpr,threshold\n")
