"""PointConv over spatio-temporal neighborhoods.

Two evaluation routes are kept side by side:

* :func:`pointconv_efficient` -- weight net maps each positional difference
  to a C_mid vector, features are aggregated into a (C_mid x C_in) matrix per
  center, and one linear map produces C_out outputs. Batched over centers.
* :func:`pointconv_direct` -- the literal sum of <w(p_i - p_0), o_i> with an
  explicit (C_in x C_out) weight per neighbor, looping over centers with the
  brute-force neighbor search. Used as the reference in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import (DistanceSpec, NeighborIndex, PointCloud, QuerySet, canonical_slots, content_rank,
                       k_nearest, neighbor_table)

SPATIAL_KINDS = ("spatial", "query_spatial")
TIME_KINDS = ("temporal", "entity_temporal", "query_entity")


# ------------------------------------------------------------------ MLPs


@dataclass
class MLP:
    """Dense layers with ReLU between them; ``final_activation`` adds one on top."""

    weights: list[Tensor]
    biases: list[Tensor]
    final_activation: bool = False

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, name: str = "mlp",
             final_activation: bool = False, bias_scale: float = 0.1) -> "MLP":
        """He-scaled hidden layers; a linear output layer gets unit gain."""
        ws, bs = [], []
        dtype = ag.default_dtype()
        n = len(sizes) - 1
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = 2.0 if (i < n - 1 or final_activation) else 1.0
            w = rng.standard_normal((a, b)) * np.sqrt(gain / max(a, 1))
            ws.append(Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.w{i}"))
            bs.append(Tensor((bias_scale * rng.standard_normal(b)).astype(dtype), requires_grad=True,
                             name=f"{name}.b{i}"))
        return cls(ws, bs, final_activation)

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ag.add(ag.matmul(x, w), b)
            if i < n - 1 or self.final_activation:
                x = ag.relu(x)
        return x

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


# ------------------------------------------------------------------ geometry


def offset_dim(kind: str, location_dim: int, include_dt: bool = False) -> int:
    """Input width of the weight net for a distance kind."""
    if kind in SPATIAL_KINDS:
        return location_dim + (1 if include_dt else 0)
    if kind in TIME_KINDS:
        return 1
    return location_dim + 1


def positional_difference(kind: str, p_i, p_0, include_dt: bool = False) -> np.ndarray:
    """p_i - p_0 restricted to the coordinates the kind's kernel is defined over."""
    dl = np.asarray(p_i.location, float) - np.asarray(p_0.location, float)
    dt = np.array([float(p_i.time) - float(p_0.time)])
    if kind in SPATIAL_KINDS:
        return np.concatenate([dl, dt]) if include_dt else dl
    if kind in TIME_KINDS:
        return dt
    return np.concatenate([dl, dt])


@dataclass
class Neighborhood:
    """Precomputed neighbor structure of one cloud against a set of centers.

    ``index`` is (M, k) with -1 padding; ``gather`` has padding replaced by 0
    so it can index safely; ``mask`` zeros padded slots; ``offsets`` is
    (M, k, d_in) positional differences (zero at padded slots).
    """

    index: np.ndarray
    gather: np.ndarray
    mask: np.ndarray
    offsets: np.ndarray

    @property
    def num_centers(self) -> int:
        return self.index.shape[0]

    def shifted(self, by: int) -> "Neighborhood":
        idx = np.where(self.index >= 0, self.index + by, -1)
        return Neighborhood(idx, np.where(idx >= 0, idx, 0), self.mask, self.offsets)


def build_neighborhood(cloud: PointCloud, centers: PointCloud | QuerySet, spec: DistanceSpec,
                       include_dt: bool = False, index: NeighborIndex | None = None,
                       space_scale: float = 1.0, time_scale: float = 1.0) -> Neighborhood:
    """Neighbor table plus weight-net inputs; offsets are divided by the scales.

    Slots are in content order (see :func:`canonical_slots`) so sums over a
    neighborhood round identically however the cloud is stored.
    """
    table = canonical_slots(neighbor_table(cloud, centers, spec, index), cloud)
    valid = table >= 0
    safe = np.where(valid, table, 0)
    dl = (cloud.locations[safe] - centers.locations[:, None, :]) / space_scale
    dt = ((cloud.times[safe] - centers.times[:, None]) / time_scale)[..., None]
    if spec.kind in SPATIAL_KINDS:
        off = np.concatenate([dl, dt], axis=-1) if include_dt else dl
    elif spec.kind in TIME_KINDS:
        off = dt
    else:
        off = np.concatenate([dl, dt], axis=-1)
    off = np.where(valid[..., None], off, 0.0)
    return Neighborhood(table, safe, valid.astype(float)[..., None], off)


def concat_neighborhoods(blocks: Sequence[Neighborhood], cloud_sizes: Sequence[int]) -> Neighborhood:
    """Stack per-example neighborhoods into one batch over concatenated clouds."""
    shifted, start = [], 0
    for block, n in zip(blocks, cloud_sizes):
        shifted.append(block.shifted(start))
        start += n
    return Neighborhood(
        np.concatenate([b.index for b in shifted]),
        np.concatenate([b.gather for b in shifted]),
        np.concatenate([b.mask for b in shifted]),
        np.concatenate([b.offsets for b in shifted]),
    )


# ------------------------------------------------------------------ parameters


@dataclass
class PointConvParams:
    weight_net: MLP
    final: Tensor  # (C_mid * C_in, C_out), row m * C_in + c
    c_in: int
    c_out: int
    # fixed quadrature weight on the neighbor sum (1/k); part of the kernel
    sum_scale: float = 1.0

    @classmethod
    def init(cls, d_in: int, c_in: int, c_out: int, rng: np.random.Generator,
             hidden: Sequence[int] = (32, 32), c_mid: int = 32, name: str = "pconv",
             k: int = 1) -> "PointConvParams":
        """``k`` sets the 1/k scale on the neighbor sum."""
        net = MLP.init([d_in, *hidden, c_mid], rng, name=f"{name}.wnet")
        fan_in = c_mid * c_in
        final = rng.standard_normal((fan_in, c_out)) * np.sqrt(1.0 / max(fan_in, 1))
        return cls(net, Tensor(final.astype(ag.default_dtype()), requires_grad=True, name=f"{name}.final"),
                   c_in, c_out, 1.0 / max(k, 1))

    @property
    def c_mid(self) -> int:
        return self.weight_net.out_dim

    @property
    def d_in(self) -> int:
        return self.weight_net.in_dim

    def parameters(self) -> list[Tensor]:
        return self.weight_net.parameters() + [self.final]


def _as_feature_tensor(cloud: PointCloud, features: Tensor | None) -> Tensor:
    return features if features is not None else Tensor(cloud.features.astype(ag.default_dtype()))


# ------------------------------------------------------------------ efficient form


def pointconv_apply(features: Tensor, nb: Neighborhood, params: PointConvParams) -> Tensor:
    """Factorized PointConv of ``features`` (N, C_in) onto the centers of ``nb``."""
    if features.shape[1] != params.c_in:
        raise ag.ShapeError("pointconv", features.shape, (params.c_in,))
    m, k = nb.index.shape
    if nb.offsets.shape[-1] != params.d_in:
        raise ag.ShapeError("pointconv offsets", nb.offsets.shape, (params.d_in,))
    dtype = features.data.dtype
    h = params.weight_net(Tensor(nb.offsets.reshape(m * k, -1).astype(dtype)))
    h = ag.mul(ag.reshape(h, (m, k, params.c_mid)), nb.mask.astype(dtype))
    gathered = ag.gather_rows(features, nb.gather)  # (m, k, c_in)
    agg = ag.bmm(ag.swap_last_axes(h), gathered)  # (m, c_mid, c_in)
    agg = ag.mul(agg, params.sum_scale)
    return ag.matmul(ag.reshape(agg, (m, params.c_mid * params.c_in)), params.final)


def pointconv_efficient(cloud: PointCloud, centers, params: PointConvParams, spec: DistanceSpec,
                        features: Tensor | None = None, include_dt: bool = False) -> Tensor:
    if cloud.feature_dim != params.c_in and features is None:
        raise ag.ShapeError("pointconv", cloud.features.shape, (params.c_in,))
    centers = _center_set(centers)
    nb = build_neighborhood(cloud, centers, spec, include_dt)
    return pointconv_apply(_as_feature_tensor(cloud, features), nb, params)


# ------------------------------------------------------------------ direct form


def composed_weight_fn(params: PointConvParams) -> Callable[[Tensor], Tensor]:
    """w(delta) as an explicit (n, C_in, C_out) tensor: the weight net followed
    by the final map, i.e. the kernel the factorized form evaluates implicitly."""

    def w(delta: Tensor) -> Tensor:
        n = delta.shape[0]
        h = params.weight_net(delta)  # (n, c_mid)
        final = ag.reshape(params.final, (params.c_mid, params.c_in * params.c_out))
        w = ag.reshape(ag.matmul(h, final), (n, params.c_in, params.c_out))
        return ag.mul(w, params.sum_scale)

    return w


def pointconv_direct(cloud: PointCloud, centers, params: PointConvParams | None, spec: DistanceSpec,
                     features: Tensor | None = None, include_dt: bool = False,
                     weight_fn: Callable[[Tensor], Tensor] | None = None,
                     c_out: int | None = None) -> Tensor:
    """Reference PointConv: one explicit kernel evaluation per (center, neighbor)."""
    feats = _as_feature_tensor(cloud, features)
    if params is not None:
        if feats.shape[1] != params.c_in:
            raise ag.ShapeError("pointconv", feats.shape, (params.c_in,))
        weight_fn = weight_fn or composed_weight_fn(params)
        c_out = params.c_out
    if weight_fn is None or c_out is None:
        raise ValueError("pointconv_direct needs params or (weight_fn, c_out)")
    dtype = feats.data.dtype
    rank = content_rank(cloud)
    rows = []
    for center in _iter_centers(centers):
        nbrs = k_nearest(cloud, center, spec)
        nbrs = nbrs[np.argsort(rank[nbrs], kind="stable")]
        if len(nbrs) == 0:
            rows.append(Tensor(np.zeros((1, c_out), dtype=dtype)))
            continue
        delta = np.stack([positional_difference(spec.kind, cloud.point(int(j)), center, include_dt)
                          for j in nbrs])
        w = weight_fn(Tensor(delta.astype(dtype)))  # (n, c_in, c_out)
        o = ag.gather_rows(feats, nbrs)  # (n, c_in)
        rows.append(ag.reshape(ag.einsum("nc,nco->o", o, w), (1, c_out)))
    return ag.concat(rows, axis=0)


# ------------------------------------------------------------------ helpers


@dataclass
class _Center:
    location: np.ndarray
    time: float
    entity_id: int | None = None


def _iter_centers(centers):
    if isinstance(centers, (PointCloud, QuerySet)):
        for c in range(len(centers)):
            eid = int(centers.entity_ids[c])
            yield _Center(centers.locations[c], float(centers.times[c]), None if eid < 0 else eid)
    else:
        yield from centers


def _center_set(centers) -> PointCloud | QuerySet:
    if isinstance(centers, (PointCloud, QuerySet)):
        return centers
    pts = list(centers)
    return QuerySet(np.stack([np.asarray(p.location, float) for p in pts]),
                    np.array([p.time for p in pts]),
                    np.array([-1 if getattr(p, "entity_id", None) is None else p.entity_id for p in pts]))
