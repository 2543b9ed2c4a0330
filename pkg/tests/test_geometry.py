import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zsseg import checks, geometry

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def point_sets(max_n=24, max_d=3):
    return st.integers(1, max_n).flatmap(
        lambda n: st.integers(1, max_d).flatmap(lambda d: arrays(np.float64, (n, d), elements=finite))
    )


def test_fps_single_point():
    assert geometry.fps(np.zeros((1, 3)), 1).tolist() == [0]


def test_fps_collinear_example():
    pts = np.array([[0.0], [1.0], [10.0]])
    assert geometry.fps(pts, 2, "first_index").tolist() == [0, 2]


def test_fps_collinear_matches_exhaustive_orders():
    pts = np.array([[0.0], [1.0], [10.0]])

    def spread(order):
        # greedy picks the order whose second element is farthest from the first
        return abs(pts[order[1], 0] - pts[order[0], 0])

    orders = [o for o in itertools.permutations(range(3), 2) if o[0] == 0]
    assert list(max(orders, key=spread)) == geometry.fps(pts, 2, "first_index").tolist()


def test_fps_rejects_bad_k():
    with pytest.raises(ValueError):
        geometry.fps(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        geometry.fps(np.zeros((3, 2)), 0)


def test_fps_random_sets_match_reference(rng):
    for i in range(60):
        n = int(rng.integers(1, 40))
        k = int(rng.integers(1, n + 1))
        pts = rng.normal(size=(n, 3))
        rule = geometry.START_RULES[i % 2]
        assert geometry.fps(pts, k, rule).tolist() == checks.fps_reference(pts, k, rule)


def test_fps_tie_goes_to_lowest_index():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    assert geometry.fps(pts, 2, "first_index").tolist() == [0, 1]


@settings(max_examples=60, deadline=None)
@given(point_sets(), st.data())
def test_fps_max_min_property(pts, data):
    n = len(pts)
    k = data.draw(st.integers(1, n))
    rule = data.draw(st.sampled_from(geometry.START_RULES))
    idx = geometry.fps(pts, k, rule).tolist()
    assert len(set(idx)) == k
    norms = (pts**2).sum(axis=1)
    assert idx[0] == (0 if rule == "first_index" else int(np.argmax(norms)))
    for t in range(1, k):
        prior = pts[idx[:t]]
        min_d = ((pts[:, None, :] - prior[None]) ** 2).sum(-1).min(axis=1)
        others = [j for j in range(n) if j not in idx[: t + 1]]
        assert all(min_d[idx[t]] >= min_d[j] for j in others)


def test_assign_single_anchor(rng):
    pts = rng.normal(size=(9, 2))
    assert not geometry.assign_to_anchors(pts, [4]).labels.any()


def test_assign_anchors_to_themselves(rng):
    pts = rng.normal(size=(12, 3))
    anchors = [3, 7, 0]
    labels = geometry.assign_to_anchors(pts, anchors).labels
    assert [labels[a] for a in anchors] == [0, 1, 2]


def test_assign_matches_exhaustive_scan(rng):
    pts = rng.normal(size=(30, 4))
    anchors = [2, 11, 19, 25]
    labels = geometry.assign_to_anchors(pts, anchors).labels
    for i, x in enumerate(pts):
        best, best_d = None, np.inf
        for b, a in enumerate(anchors):
            d = sum((x[j] - pts[a][j]) ** 2 for j in range(4))
            if d < best_d:
                best, best_d = b, d
        assert labels[i] == best


def test_assign_tie_goes_to_first_anchor():
    pts = np.array([[-1.0], [1.0], [0.0]])
    assert geometry.assign_to_anchors(pts, [0, 1]).labels.tolist() == [0, 1, 0]


def test_assign_needs_anchor():
    with pytest.raises(ValueError):
        geometry.assign_to_anchors(np.zeros((2, 2)), [])


def test_prototype_count_rules():
    assert geometry.prototype_count(100, 0.04) == 4
    assert geometry.prototype_count(24, 0.04) == 1
    assert geometry.prototype_count(60, 0.04) == 2
    assert geometry.prototype_count(60, 0.04, "round") == 2
    assert geometry.prototype_count(63, 0.04, "round") == 3
    assert geometry.prototype_count(5, 0.999) == 4


def test_neighbor_aware_identical_features():
    feats = np.tile([1.5, -2.0, 0.25], (50, 1))
    protos = geometry.neighbor_aware_prototypes(feats, 0.1)
    assert protos.shape == (5, 3)
    np.testing.assert_array_equal(protos, feats[:5])


def test_neighbor_aware_count_at_default_ratio(rng):
    assert geometry.neighbor_aware_prototypes(rng.normal(size=(100, 6)), 0.04).shape == (4, 6)


def test_neighbor_aware_matches_recomputed_means(rng):
    for _ in range(20):
        n = int(rng.integers(1, 64))
        feats = rng.normal(size=(n, 3))
        r = float(rng.uniform(0.02, 0.6))
        anchors = checks.fps_reference(feats, geometry.prototype_count(n, r))
        expected = checks.region_means_reference(feats, anchors)
        np.testing.assert_allclose(geometry.neighbor_aware_prototypes(feats, r), expected, atol=1e-12, rtol=0)


def test_neighbor_aware_full_ratio_returns_features(rng):
    feats = rng.normal(size=(4, 2))
    protos = geometry.neighbor_aware_prototypes(feats, 0.99, rounding="round")
    order = geometry.fps(feats, 4)
    np.testing.assert_array_equal(protos, feats[order])


@settings(max_examples=40, deadline=None)
@given(point_sets(max_n=40), st.floats(0.01, 0.9))
def test_prototypes_lie_in_region_bounds(feats, r):
    k = geometry.prototype_count(len(feats), r)
    labels = geometry.assign_to_anchors(feats, geometry.fps(feats, k)).labels
    protos = geometry.neighbor_aware_prototypes(feats, r)
    for b in range(k):
        region = feats[labels == b]
        assert len(region) >= 1
        assert np.all(protos[b] >= region.min(axis=0) - 1e-9)
        assert np.all(protos[b] <= region.max(axis=0) + 1e-9)


def test_simple_average_examples(rng):
    v = rng.normal(size=5)
    np.testing.assert_array_equal(geometry.simple_average_prototype(v[None]), v[None])
    np.testing.assert_allclose(geometry.simple_average_prototype(np.stack([v, -v])), np.zeros((1, 5)), atol=1e-15)
    rows = rng.normal(size=(9, 4))
    expected = [sum(rows[i, j] for i in range(9)) / 9 for j in range(4)]
    np.testing.assert_allclose(geometry.simple_average_prototype(rows)[0], expected, atol=1e-14)


def test_kmeans_k_equals_n(rng):
    feats = rng.normal(size=(6, 2))
    centers = geometry.kmeans_prototypes(feats, 6, seed=3)
    assert sorted(map(tuple, centers)) == sorted(map(tuple, feats))


def test_kmeans_two_pairs_match_best_partition():
    feats = np.array([[0.0, 0.0], [0.2, 0.0], [10.0, 10.0], [10.0, 10.4]])
    best, best_cost = None, np.inf
    for mask in range(1, 2**4 - 1):
        groups = [feats[[i for i in range(4) if (mask >> i) & 1 == g]] for g in (0, 1)]
        cost = sum(((grp - grp.mean(axis=0)) ** 2).sum() for grp in groups)
        if cost < best_cost:
            best, best_cost = sorted(tuple(grp.mean(axis=0)) for grp in groups), cost
    for seed in range(5):
        centers = geometry.kmeans_prototypes(feats, 2, seed=seed)
        np.testing.assert_allclose(sorted(map(tuple, centers)), best, atol=1e-12)


def test_kmeans_single_cluster_is_average(rng):
    feats = rng.normal(size=(15, 3))
    np.testing.assert_allclose(geometry.kmeans_prototypes(feats, 1), geometry.simple_average_prototype(feats), atol=1e-14)


def test_kmeans_rejects_large_k():
    with pytest.raises(ValueError):
        geometry.kmeans_prototypes(np.zeros((2, 2)), 3)


def test_kmeans_duplicate_points_keep_k_centers():
    feats = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
    centers = geometry.kmeans_prototypes(feats, 3, seed=0)
    assert centers.shape == (3, 2) and np.isfinite(centers).all()


def test_build_prototypes_dispatch(rng):
    feats = rng.normal(size=(50, 3))
    assert geometry.build_prototypes(feats, "neighbor_aware", 0.1).shape == (5, 3)
    assert geometry.build_prototypes(feats, "simple_average").shape == (1, 3)
    assert geometry.build_prototypes(feats, "kmeans", 0.1).shape == (5, 3)
    with pytest.raises(ValueError):
        geometry.build_prototypes(feats, "median")


def test_duplicate_anchors_keep_non_empty_regions():
    feats = np.array([[0.0], [0.0], [0.0], [5.0]])
    labels = geometry.assign_to_anchors(feats, [3, 0, 1]).labels
    assert sorted(set(labels.tolist())) == [0, 1, 2]
