"""Spatio-temporal points, piecewise distances and windowed k-NN search."""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

INF = math.inf
NO_ENTITY = -1

DISTANCE_KINDS = ("spatial", "temporal", "entity_temporal", "combined", "query_spatial", "query_entity")


def _as_rows(values, n: int) -> np.ndarray:
    """``values`` as an (n, d) float array; an (n, d) input keeps its shape even when n == 0."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2 and arr.shape[0] == n:
        return arr
    return arr.reshape(n, -1)


@dataclass
class STPoint:
    location: np.ndarray
    time: float
    entity_id: int | None = None
    features: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.location = np.asarray(self.location, dtype=float)
        self.features = np.asarray(self.features, dtype=float)
        if not math.isfinite(self.time):
            raise ValueError("STPoint time must be finite")


@dataclass
class PointCloud:
    """Column-oriented point cloud; row ``j`` is the point p_j.

    ``entity_ids`` uses -1 for points without an entity.
    """

    locations: np.ndarray
    times: np.ndarray
    features: np.ndarray
    entity_ids: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        n = len(self.times)
        self.locations = _as_rows(self.locations, n)
        self.features = _as_rows(self.features, n)
        if self.entity_ids is None:
            self.entity_ids = np.full(n, NO_ENTITY, dtype=np.int64)
        else:
            self.entity_ids = np.asarray(self.entity_ids, dtype=np.int64).reshape(-1)
        if not np.isfinite(self.times).all():
            raise ValueError("PointCloud times must be finite")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def location_dim(self) -> int:
        return self.locations.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def point(self, j: int) -> STPoint:
        eid = int(self.entity_ids[j])
        return STPoint(self.locations[j], float(self.times[j]), None if eid < 0 else eid, self.features[j])

    def points(self) -> list[STPoint]:
        return [self.point(j) for j in range(len(self))]

    @classmethod
    def from_points(cls, points: list[STPoint]) -> "PointCloud":
        if not points:
            raise ValueError("PointCloud.from_points needs at least one point")
        return cls(
            np.stack([p.location for p in points]),
            np.array([p.time for p in points]),
            np.stack([p.features for p in points]),
            np.array([NO_ENTITY if p.entity_id is None else p.entity_id for p in points]),
        )

    def with_features(self, features: np.ndarray) -> "PointCloud":
        return PointCloud(self.locations, self.times, features, self.entity_ids)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.intp)
        return PointCloud(self.locations[idx], self.times[idx], self.features[idx], self.entity_ids[idx])


@dataclass
class QuerySet:
    """Featureless query points (location, time, optional entity)."""

    locations: np.ndarray
    times: np.ndarray
    entity_ids: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        n = len(self.times)
        self.locations = _as_rows(self.locations, n)
        if self.entity_ids is None:
            self.entity_ids = np.full(n, NO_ENTITY, dtype=np.int64)
        else:
            self.entity_ids = np.asarray(self.entity_ids, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.times)

    def as_cloud(self) -> PointCloud:
        return PointCloud(self.locations, self.times, np.zeros((len(self), 0)), self.entity_ids)


@dataclass(frozen=True)
class DistanceSpec:
    kind: str
    eps_t: float | None = None
    eps_s: float | None = None
    tradeoff: float | None = None
    k: int = 8

    def __post_init__(self):
        if self.kind not in DISTANCE_KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("neighbor cap k must be a positive integer")
        need = {
            "spatial": ("eps_t",),
            "query_spatial": ("eps_t",),
            "temporal": ("eps_s",),
            "combined": ("tradeoff",),
        }.get(self.kind, ())
        for name in need:
            value = getattr(self, name)
            if value is None or not value > 0:
                raise ValueError(f"distance kind {self.kind!r} requires positive {name}")


# ------------------------------------------------------------------ scalar forms


def _euclid(a: np.ndarray, b: np.ndarray) -> float:
    return _norm_rows(np.asarray(a, float)[None, :] - np.asarray(b, float)[None, :])[0]


def _norm_rows(diff: np.ndarray) -> np.ndarray:
    # explicit per-dimension accumulation: identical rounding for any subset of rows
    acc = diff[:, 0] * diff[:, 0]
    for d in range(1, diff.shape[1]):
        acc = acc + diff[:, d] * diff[:, d]
    return np.sqrt(acc)


def d_spatial(p_i: STPoint, p_j: STPoint, eps_t: float) -> float:
    if abs(p_i.time - p_j.time) <= eps_t:
        return float(_euclid(p_i.location, p_j.location))
    return INF


def d_temporal(p_i: STPoint, p_j: STPoint, eps_s: float) -> float:
    if _euclid(p_i.location, p_j.location) <= eps_s:
        return abs(p_i.time - p_j.time)
    return INF


def d_entity(p_i: STPoint, p_j: STPoint) -> float:
    if p_i.entity_id is None or p_j.entity_id is None:
        raise ValueError("d_entity requires both points to carry an entity id")
    if p_i.entity_id == p_j.entity_id:
        return abs(p_i.time - p_j.time)
    return INF


def d_combined(p_i: STPoint, p_j: STPoint, x: float) -> float:
    ds = _euclid(p_i.location, p_j.location)
    dt = p_i.time - p_j.time
    return float(np.sqrt(ds * ds + x * (dt * dt)))


def distance(p_i: STPoint, p_j: STPoint, spec: DistanceSpec) -> float:
    if spec.kind in ("spatial", "query_spatial"):
        return d_spatial(p_i, p_j, spec.eps_t)
    if spec.kind == "temporal":
        return d_temporal(p_i, p_j, spec.eps_s)
    if spec.kind in ("entity_temporal", "query_entity"):
        return d_entity(p_i, p_j)
    return d_combined(p_i, p_j, spec.tradeoff)


# ------------------------------------------------------------------ vectorised


def _center_arrays(center):
    loc = np.asarray(center.location, dtype=float)
    eid = getattr(center, "entity_id", None)
    return loc, float(center.time), (NO_ENTITY if eid is None else int(eid))


def distances_to(cloud: PointCloud, idx: np.ndarray, loc: np.ndarray, t: float, eid: int,
                 spec: DistanceSpec) -> np.ndarray:
    """Distances from rows ``idx`` of ``cloud`` to one center; +inf outside the window."""
    locs = cloud.locations[idx]
    dt = cloud.times[idx] - t
    kind = spec.kind
    if kind in ("spatial", "query_spatial"):
        d = _norm_rows(locs - loc)
        return np.where(np.abs(dt) <= spec.eps_t, d, INF)
    if kind == "temporal":
        ds = _norm_rows(locs - loc)
        return np.where(ds <= spec.eps_s, np.abs(dt), INF)
    if kind in ("entity_temporal", "query_entity"):
        if eid == NO_ENTITY:
            raise ValueError("entity distance requires the center to carry an entity id")
        ids = cloud.entity_ids[idx]
        if (ids == NO_ENTITY).any():
            raise ValueError("entity distance requires every cloud point to carry an entity id")
        return np.where(ids == eid, np.abs(dt), INF)
    ds = _norm_rows(locs - loc)
    return np.sqrt(ds * ds + spec.tradeoff * (dt * dt))


def _select(idx: np.ndarray, d: np.ndarray, k: int) -> np.ndarray:
    keep = np.isfinite(d)
    idx, d = idx[keep], d[keep]
    order = np.lexsort((idx, d))
    return idx[order[:k]]


def k_nearest(cloud: PointCloud, center, spec: DistanceSpec) -> np.ndarray:
    """Brute-force neighbor search: up to k finite-distance indices sorted by
    (distance, index)."""
    loc, t, eid = _center_arrays(center)
    idx = np.arange(len(cloud))
    return _select(idx, distances_to(cloud, idx, loc, t, eid, spec), spec.k)


class NeighborIndex:
    """Bucketed candidate lookup whose answers equal :func:`k_nearest`.

    Windowed kinds hash into buckets sized by the window (time buckets for
    the spatial kinds, space cells for the temporal kind, one bucket per
    entity for the entity kinds), so only nearby buckets are scanned. The
    combined kind has no window; it uses a KD-tree over (l, sqrt(x) t) to
    find a radius holding the k nearest, then ranks those exactly.
    """

    def __init__(self, cloud: PointCloud, spec: DistanceSpec):
        self.cloud = cloud
        self.spec = spec
        kind = spec.kind
        self._buckets: dict = defaultdict(list)
        self._tree = None
        if kind in ("spatial", "query_spatial"):
            keys = np.floor(cloud.times / spec.eps_t).astype(np.int64)
            for j, key in enumerate(keys):
                self._buckets[int(key)].append(j)
        elif kind == "temporal":
            keys = np.floor(cloud.locations / spec.eps_s).astype(np.int64)
            for j, key in enumerate(keys):
                self._buckets[tuple(key)].append(j)
            self._offsets = list(itertools.product(range(-2, 3), repeat=cloud.location_dim))
        elif kind in ("entity_temporal", "query_entity"):
            for j, eid in enumerate(cloud.entity_ids):
                self._buckets[int(eid)].append(j)
        else:
            self._scale = math.sqrt(spec.tradeoff)
            self._tree = cKDTree(self._embed(cloud.locations, cloud.times))
        self._buckets = {key: np.asarray(v, dtype=np.intp) for key, v in self._buckets.items()}

    def _embed(self, locs, times):
        return np.column_stack([np.atleast_2d(locs), self._scale * np.asarray(times).reshape(-1)])

    def candidates(self, loc: np.ndarray, t: float, eid: int) -> np.ndarray:
        kind = self.spec.kind
        empty = np.zeros(0, dtype=np.intp)
        if kind in ("spatial", "query_spatial"):
            b = math.floor(t / self.spec.eps_t)
            parts = [self._buckets.get(b + o, empty) for o in range(-2, 3)]
        elif kind == "temporal":
            cell = np.floor(loc / self.spec.eps_s).astype(np.int64)
            parts = [self._buckets.get(tuple(cell + np.array(o)), empty) for o in self._offsets]
        elif kind in ("entity_temporal", "query_entity"):
            if eid == NO_ENTITY:
                raise ValueError("entity distance requires the center to carry an entity id")
            parts = [self._buckets.get(eid, empty)]
        else:
            n = len(self.cloud)
            k = min(self.spec.k, n)
            q = self._embed(loc[None, :], [t])[0]
            dk, _ = self._tree.query(q, k=k)
            radius = float(np.max(dk))
            found = self._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12)
            return np.sort(np.asarray(found, dtype=np.intp))
        return np.sort(np.concatenate(parts)) if parts else empty

    def query(self, center) -> np.ndarray:
        loc, t, eid = _center_arrays(center)
        idx = self.candidates(loc, t, eid)
        if len(idx) == 0:
            return idx
        return _select(idx, distances_to(self.cloud, idx, loc, t, eid, self.spec), self.spec.k)


def build_index(cloud: PointCloud, spec: DistanceSpec) -> NeighborIndex:
    return NeighborIndex(cloud, spec)


@dataclass
class _Center:
    location: np.ndarray
    time: float
    entity_id: int | None


def distance_matrix(cloud: PointCloud, centers, spec: DistanceSpec) -> np.ndarray:
    """(M, N) distances from every center to every cloud point, +inf outside
    the window. Elementwise the same arithmetic as :func:`distances_to`."""
    diff = cloud.locations[None, :, :] - centers.locations[:, None, :]
    dt = cloud.times[None, :] - centers.times[:, None]
    kind = spec.kind
    acc = diff[..., 0] * diff[..., 0]
    for d in range(1, diff.shape[-1]):
        acc = acc + diff[..., d] * diff[..., d]
    ds = np.sqrt(acc)
    if kind in ("spatial", "query_spatial"):
        return np.where(np.abs(dt) <= spec.eps_t, ds, INF)
    if kind == "temporal":
        return np.where(ds <= spec.eps_s, np.abs(dt), INF)
    if kind in ("entity_temporal", "query_entity"):
        if (centers.entity_ids == NO_ENTITY).any():
            raise ValueError("entity distance requires the center to carry an entity id")
        if (cloud.entity_ids == NO_ENTITY).any():
            raise ValueError("entity distance requires every cloud point to carry an entity id")
        same = cloud.entity_ids[None, :] == centers.entity_ids[:, None]
        return np.where(same, np.abs(dt), INF)
    return np.sqrt(ds * ds + spec.tradeoff * (dt * dt))


def _dense_table(cloud: PointCloud, centers, spec: DistanceSpec, chunk: int) -> np.ndarray:
    m, k = len(centers), spec.k
    table = np.full((m, k), -1, dtype=np.intp)
    kk = min(k, len(cloud))
    for start in range(0, m, chunk):
        sub = _rows(centers, slice(start, start + chunk))
        d = distance_matrix(cloud, sub, spec)
        # stable sort keeps equal distances in index order
        order = np.argsort(d, axis=1, kind="stable")[:, :kk]
        finite = np.isfinite(np.take_along_axis(d, order, axis=1))
        table[start:start + len(sub), :kk] = np.where(finite, order, -1)
    return table


def _rows(centers, sl):
    return QuerySet(centers.locations[sl], centers.times[sl], centers.entity_ids[sl])


def content_rank(cloud: PointCloud) -> np.ndarray:
    """Rank of every point in an order fixed by (time, location, entity)
    alone, so it does not depend on the order points are stored in."""
    keys = [cloud.entity_ids] + [cloud.locations[:, d] for d in range(cloud.location_dim - 1, -1, -1)]
    order = np.lexsort(keys + [cloud.times])
    rank = np.empty(len(cloud), dtype=np.intp)
    rank[order] = np.arange(len(cloud))
    return rank


def canonical_slots(table: np.ndarray, cloud: PointCloud) -> np.ndarray:
    """Reorder each row of a neighbor table by content rank (padding last).

    The selected set is unchanged; only the order in which neighbors are
    later summed becomes independent of how the cloud is stored.
    """
    rank = content_rank(cloud)
    key = np.where(table >= 0, rank[np.where(table >= 0, table, 0)], len(cloud))
    return np.take_along_axis(table, np.argsort(key, axis=1, kind="stable"), axis=1)


def neighbor_table(cloud: PointCloud, centers, spec: DistanceSpec,
                   index: NeighborIndex | None = None, method: str = "auto") -> np.ndarray:
    """(M, k) int array of neighbor indices for every center, padded with -1.

    ``centers`` is a PointCloud or QuerySet. ``method`` picks the dense
    all-pairs route, the bucketed :class:`NeighborIndex`, or (``auto``) dense
    for clouds up to a few thousand points unless an index is given.
    """
    if method not in ("auto", "dense", "index"):
        raise ValueError(f"unknown neighbor method {method!r}")
    if method == "dense" or (method == "auto" and index is None and len(cloud) <= 4096):
        return _dense_table(cloud, centers, spec, chunk=max(1, 2_000_000 // max(len(cloud), 1)))
    index = index or build_index(cloud, spec)
    m = len(centers)
    table = np.full((m, spec.k), -1, dtype=np.intp)
    for c in range(m):
        eid = int(centers.entity_ids[c])
        center = _Center(centers.locations[c], float(centers.times[c]), None if eid < 0 else eid)
        nb = index.query(center)
        table[c, :len(nb)] = nb
    return table
