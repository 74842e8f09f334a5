import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpconv.geometry import (DistanceSpec, PointCloud, QuerySet, STPoint, build_index, d_combined,
                             d_entity, d_spatial, d_temporal, distance, k_nearest, neighbor_table)

KINDS = ["spatial", "temporal", "entity_temporal", "combined", "query_spatial", "query_entity"]


def spec_for(kind, k=8, eps_t=0.75, eps_s=1.5, x=1.0):
    return DistanceSpec(kind, eps_t=eps_t, eps_s=eps_s, tradeoff=x, k=k)


def random_cloud(rng, n, arena=10.0, horizon=10.0, entities=20, integer_times=False):
    times = rng.integers(-int(horizon), 1, n).astype(float) if integer_times else rng.uniform(-horizon, 0, n)
    return PointCloud(rng.uniform(0, arena, (n, 2)), times, rng.normal(size=(n, 3)), rng.integers(0, entities, n))


def random_centers(rng, m, arena=10.0, horizon=10.0, entities=20):
    return QuerySet(rng.uniform(0, arena, (m, 2)), rng.uniform(-horizon, 0, m), rng.integers(0, entities, m))


def p(x, y, t, e=None):
    return STPoint(np.array([x, y], float), t, e)


# ------------------------------------------------------------------ scalar forms


def test_spatial_distance():
    assert d_spatial(p(0, 0, 0), p(3, 4, 0.5), 1.0) == 5.0
    assert d_spatial(p(0, 0, 0), p(3, 4, 0.5), 0.2) == math.inf
    assert d_spatial(p(1, 2, 3), p(1, 2, 3), 0.1) == 0.0


def test_temporal_distance():
    assert d_temporal(p(1, 1, 1), p(1, 1, 4), 0.5) == 3.0
    assert d_temporal(p(0, 0, 0), p(6, 8, 0), 1.0) == math.inf
    assert d_temporal(p(1, 2, 3), p(1, 2, 3), 0.1) == 0.0


def test_entity_distance():
    assert d_entity(p(0, 0, 1, 7), p(5, 5, 3, 7)) == 2.0
    assert d_entity(p(0, 0, 1, 7), p(0, 0, 1, 8)) == math.inf
    assert d_entity(p(0, 0, 1, 7), p(0, 0, 1, 7)) == 0.0
    with pytest.raises(ValueError):
        d_entity(p(0, 0, 1), p(0, 0, 1, 2))


def test_combined_distance():
    assert d_combined(p(0, 0, 0), p(3, 0, 4), 1.0) == 5.0
    assert d_combined(p(0, 0, 0), p(3, 4, 0), 123.0) == 5.0
    assert d_combined(p(0, 0, 0), p(0, 0, 2), 0.25) == 1.0


def test_spec_validation():
    with pytest.raises(ValueError):
        DistanceSpec("spatial")
    with pytest.raises(ValueError):
        DistanceSpec("temporal", eps_s=-1.0)
    with pytest.raises(ValueError):
        DistanceSpec("combined", tradeoff=1.0, k=0)
    with pytest.raises(ValueError):
        DistanceSpec("manhattan")


coord = st.floats(-20, 20, allow_nan=False)
point = st.builds(lambda x, y, t, e: p(x, y, t, e), coord, coord, coord, st.integers(0, 3))


@settings(max_examples=300, deadline=None)
@given(a=point, b=point, kind=st.sampled_from(["spatial", "temporal", "entity_temporal", "combined"]))
def test_symmetry_and_identity(a, b, kind):
    spec = spec_for(kind, eps_t=2.0, eps_s=5.0, x=0.7)
    assert distance(a, b, spec) == distance(b, a, spec)
    assert distance(a, a, spec) == 0.0


@settings(max_examples=300, deadline=None)
@given(a=point, b=point, eps=st.floats(0.01, 10), grow=st.floats(1.0, 10))
def test_window_monotonicity(a, b, eps, grow):
    if math.isfinite(d_spatial(a, b, eps)):
        assert math.isfinite(d_spatial(a, b, eps * grow))
    if math.isfinite(d_temporal(a, b, eps)):
        assert math.isfinite(d_temporal(a, b, eps * grow))


@settings(max_examples=300, deadline=None)
@given(a=point, b=point, x=st.floats(0.01, 50), dx=st.floats(0.01, 50))
def test_combined_increasing_in_tradeoff(a, b, x, dx):
    if abs(a.time - b.time) > 1e-3:
        assert d_combined(a, b, x + dx) > d_combined(a, b, x)


# ------------------------------------------------------------------ k nearest


def test_fewer_than_k_in_window():
    cloud = PointCloud(np.array([[0, 0], [1, 0], [2, 0], [9, 9]], float), np.array([0, 0, 0, 5.0]), np.zeros((4, 1)))
    nb = k_nearest(cloud, p(0.9, 0, 0), spec_for("spatial", k=8, eps_t=1.0))
    assert nb.tolist() == [1, 0, 2]


def test_all_out_of_window():
    cloud = PointCloud(np.zeros((3, 2)), np.array([5.0, 6.0, 7.0]), np.zeros((3, 1)))
    assert len(k_nearest(cloud, p(0, 0, 0), spec_for("spatial", eps_t=1.0))) == 0


def test_ties_lower_index_first():
    cloud = PointCloud(np.array([[1, 0], [-1, 0], [0, 1]], float), np.zeros(3), np.zeros((3, 1)))
    assert k_nearest(cloud, p(0, 0, 0), spec_for("spatial", k=2, eps_t=1.0)).tolist() == [0, 1]


def test_single_point_cloud_index():
    cloud = PointCloud(np.array([[0.0, 0.0]]), np.array([0.0]), np.zeros((1, 1)))
    index = build_index(cloud, spec_for("spatial", eps_t=1.0))
    assert index.query(p(5, 5, 0.5)).tolist() == [0]
    assert index.query(p(5, 5, 2.0)).tolist() == []


def test_identical_points_first_k_by_index():
    cloud = PointCloud(np.ones((12, 2)), np.zeros(12), np.zeros((12, 1)), np.zeros(12, int))
    for kind in KINDS:
        index = build_index(cloud, spec_for(kind, k=5))
        assert index.query(p(1, 1, 0, 0)).tolist() == [0, 1, 2, 3, 4]


@pytest.mark.parametrize("kind", KINDS)
def test_index_equals_brute_force_1000_points(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    cloud = random_cloud(rng, 1000)
    centers = random_centers(rng, 100)
    spec = spec_for(kind)
    index = build_index(cloud, spec)
    for c in range(len(centers)):
        center = p(*centers.locations[c], centers.times[c], int(centers.entity_ids[c]))
        assert index.query(center).tolist() == k_nearest(cloud, center, spec).tolist()


@pytest.mark.parametrize("kind", KINDS)
def test_dense_table_equals_index_table(kind):
    # integer times make many exact distance ties
    rng = np.random.default_rng(7)
    cloud = random_cloud(rng, 600, integer_times=True)
    centers = random_centers(rng, 80)
    spec = spec_for(kind)
    dense = neighbor_table(cloud, centers, spec, method="dense")
    indexed = neighbor_table(cloud, centers, spec, method="index")
    np.testing.assert_array_equal(dense, indexed)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 80), k=st.integers(1, 10),
       kind=st.sampled_from(KINDS), eps=st.floats(0.2, 4.0), x=st.floats(0.05, 20.0),
       integer_times=st.booleans())
def test_index_brute_force_property(seed, n, k, kind, eps, x, integer_times):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n, arena=5.0, horizon=5.0, entities=4, integer_times=integer_times)
    centers = random_centers(rng, 10, arena=5.0, horizon=5.0, entities=4)
    spec = spec_for(kind, k=k, eps_t=eps, eps_s=eps, x=x)
    brute = np.full((len(centers), k), -1)
    for c in range(len(centers)):
        nb = k_nearest(cloud, p(*centers.locations[c], centers.times[c], int(centers.entity_ids[c])), spec)
        brute[c, :len(nb)] = nb
    np.testing.assert_array_equal(neighbor_table(cloud, centers, spec, method="index"), brute)
    np.testing.assert_array_equal(neighbor_table(cloud, centers, spec, method="dense"), brute)


def test_entity_kind_needs_ids():
    cloud = PointCloud(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        k_nearest(cloud, p(0, 0, 0, 1), spec_for("entity_temporal"))


def test_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)), np.zeros(2), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 2)), np.array([0.0, np.nan]), np.zeros((2, 1)))
