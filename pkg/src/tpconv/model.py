"""TemporalPointConv layers, query decoding and the DeepSets substitute."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import DistanceSpec, PointCloud, QuerySet
from .pointconv import (MLP, Neighborhood, PointConvParams, build_neighborhood,
                        concat_neighborhoods, offset_dim, pointconv_apply)

CHECKPOINT_SCHEMA = 1


@dataclass
class ModelConfig:
    in_dim: int
    target_dim: int
    eps_t: float = 0.75
    eps_s: float = 1.0
    k: int = 8
    baseline: str = "pointconv"  # or "deepsets"
    temporal_kind: str = "spatial_window"  # or "entity"
    query_kind: str = "query_spatial"  # or "query_entity"
    combined: bool = False
    tradeoff: float = 1.0
    spatial_include_dt: bool = False
    location_dim: int = 2
    # coordinates are divided by these before entering weight nets / phi
    space_scale: float = 1.0
    time_scale: float = 1.0
    latent_sizes: tuple = (16, 32, 32)
    encoder_hidden: tuple = (32, 64, 64)
    weight_hidden: tuple = (32, 32)
    c_mid: int = 32
    query_latent: int = 64
    decoder_hidden: tuple = (64, 64, 64)
    deepsets_hidden: tuple = (192, 192, 192)

    def __post_init__(self):
        if self.baseline not in ("pointconv", "deepsets"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.temporal_kind not in ("spatial_window", "entity"):
            raise ValueError(f"unknown temporal kind {self.temporal_kind!r}")
        if self.query_kind not in ("query_spatial", "query_entity"):
            raise ValueError(f"unknown query kind {self.query_kind!r}")
        for name in ("latent_sizes", "encoder_hidden", "weight_hidden", "decoder_hidden", "deepsets_hidden"):
            setattr(self, name, tuple(getattr(self, name)))
        if len(self.encoder_hidden) != len(self.latent_sizes):
            raise ValueError("encoder_hidden needs one entry per layer")
        if not (self.space_scale > 0 and self.time_scale > 0):
            raise ValueError("coordinate scales must be positive")

    @property
    def uses_entities(self) -> bool:
        return self.temporal_kind == "entity" or self.query_kind == "query_entity"

    def spatial_spec(self) -> DistanceSpec:
        return DistanceSpec("spatial", eps_t=self.eps_t, k=self.k)

    def temporal_spec(self) -> DistanceSpec:
        if self.temporal_kind == "entity":
            return DistanceSpec("entity_temporal", k=self.k)
        return DistanceSpec("temporal", eps_s=self.eps_s, k=self.k)

    def combined_spec(self) -> DistanceSpec:
        return DistanceSpec("combined", tradeoff=self.tradeoff, k=self.k)

    def query_spec(self) -> DistanceSpec:
        if self.combined:
            return self.combined_spec()
        if self.query_kind == "query_entity":
            return DistanceSpec("query_entity", k=self.k)
        return DistanceSpec("query_spatial", eps_t=self.eps_t, k=self.k)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ DeepSets


@dataclass
class DeepSetsParams:
    phi: MLP
    rho: MLP
    c_in: int
    sum_scale: float = 1.0

    @classmethod
    def init(cls, location_dim: int, c_in: int, c_out: int, hidden: Sequence[int],
             rng: np.random.Generator, name: str = "dset", k: int = 1) -> "DeepSetsParams":
        h = list(hidden)
        phi = MLP.init([location_dim + 1 + c_in, *h[:-1]], rng, name=f"{name}.phi", final_activation=True)
        rho = MLP.init([h[-2] if len(h) > 1 else h[0], h[-1], c_out], rng, name=f"{name}.rho")
        return cls(phi, rho, c_in, 1.0 / max(k, 1))

    @property
    def c_out(self) -> int:
        return self.rho.out_dim

    def parameters(self) -> list[Tensor]:
        return self.phi.parameters() + self.rho.parameters()


def deepsets_apply(features: Tensor, locations: np.ndarray, times: np.ndarray, nb: Neighborhood,
                   params: DeepSetsParams) -> Tensor:
    """rho(sum over neighbors of phi([l_i, t_i, o_i])), absolute coordinates."""
    if features.shape[1] != params.c_in:
        raise ag.ShapeError("deepsets", features.shape, (params.c_in,))
    m, k = nb.index.shape
    dtype = features.data.dtype
    coords = np.concatenate([locations[nb.gather], times[nb.gather][..., None]], axis=-1)
    x = ag.concat([Tensor(coords.astype(dtype)), ag.gather_rows(features, nb.gather)], axis=-1)
    h = params.phi(ag.reshape(x, (m * k, x.shape[-1])))
    h = ag.mul(ag.reshape(h, (m, k, h.shape[-1])), nb.mask.astype(dtype))
    return params.rho(ag.mul(ag.sum_reduce(h, axis=1), params.sum_scale))


def deepsets_aggregate(cloud: PointCloud, centers, params: DeepSetsParams, spec: DistanceSpec,
                       features: Tensor | None = None) -> Tensor:
    nb = build_neighborhood(cloud, centers, spec)
    feats = features if features is not None else Tensor(cloud.features.astype(ag.default_dtype()))
    return deepsets_apply(feats, cloud.locations, cloud.times, nb, params)


# ------------------------------------------------------------------ parameters


@dataclass
class TPCLayerParams:
    spatial: PointConvParams | DeepSetsParams
    temporal: PointConvParams | DeepSetsParams | None
    f: MLP
    f_in: int
    f_s: int
    f_t: int
    f_out: int

    def parameters(self) -> list[Tensor]:
        out = self.spatial.parameters()
        if self.temporal is not None:
            out += self.temporal.parameters()
        return out + self.f.parameters()


@dataclass
class ModelParams:
    config: ModelConfig
    layers: list[TPCLayerParams]
    query: PointConvParams | DeepSetsParams
    g: MLP

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += layer.parameters()
        return out + self.query.parameters() + self.g.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _conv_params(config: ModelConfig, kind: str, c_in: int, c_out: int, rng, name: str):
    if config.baseline == "deepsets":
        return DeepSetsParams.init(config.location_dim, c_in, c_out, config.deepsets_hidden, rng, name, k=config.k)
    include_dt = config.spatial_include_dt and kind == "spatial"
    d_in = offset_dim(kind, config.location_dim, include_dt)
    return PointConvParams.init(d_in, c_in, c_out, rng, config.weight_hidden, config.c_mid, name, k=config.k)


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    layers = []
    f_in = config.in_dim
    for d, (latent, hidden) in enumerate(zip(config.latent_sizes, config.encoder_hidden)):
        if config.combined:
            spatial = _conv_params(config, "combined", f_in, latent, rng, f"layer{d}.combined")
            temporal, f_t = None, 0
        else:
            spatial = _conv_params(config, "spatial", f_in, latent, rng, f"layer{d}.spatial")
            temporal_kind = "entity_temporal" if config.temporal_kind == "entity" else "temporal"
            temporal = _conv_params(config, temporal_kind, f_in + latent, latent, rng, f"layer{d}.temporal")
            f_t = latent
        f = MLP.init([f_in + latent + f_t, hidden, latent], rng, name=f"layer{d}.f")
        layers.append(TPCLayerParams(spatial, temporal, f, f_in, latent, f_t, latent))
        f_in = latent
    qkind = "combined" if config.combined else config.query_kind
    query = _conv_params(config, qkind, f_in, config.query_latent, rng, "query")
    g = MLP.init([config.query_latent, *config.decoder_hidden, config.target_dim], rng, name="g")
    return ModelParams(config, layers, query, g)


# ------------------------------------------------------------------ geometry cache


@dataclass
class ExampleGeometry:
    """Everything about an example's layout the network needs; features aside."""

    locations: np.ndarray
    times: np.ndarray
    num_points: int
    num_queries: int
    spatial: Neighborhood | None
    temporal: Neighborhood | None
    combined: Neighborhood | None
    query: Neighborhood

    def summary(self) -> dict:
        def fill(nb):
            return None if nb is None else float(nb.mask.mean())
        return {"points": self.num_points, "queries": self.num_queries,
                "spatial_fill": fill(self.spatial), "temporal_fill": fill(self.temporal),
                "query_fill": fill(self.query)}


def build_geometry(cloud: PointCloud, queries: QuerySet, config: ModelConfig) -> ExampleGeometry:
    if len(cloud) == 0:
        raise ValueError("model input cloud must be non-empty")
    if config.uses_entities and (cloud.entity_ids < 0).any():
        raise ValueError("entity neighborhoods require entity ids on every point")
    spatial = temporal = combined = None
    scales = {"space_scale": config.space_scale, "time_scale": config.time_scale}
    if config.combined:
        combined = build_neighborhood(cloud, cloud, config.combined_spec(), **scales)
    else:
        spatial = build_neighborhood(cloud, cloud, config.spatial_spec(), config.spatial_include_dt, **scales)
        temporal = build_neighborhood(cloud, cloud, config.temporal_spec(), **scales)
    query = build_neighborhood(cloud, queries, config.query_spec(), **scales)
    return ExampleGeometry(cloud.locations / config.space_scale, cloud.times / config.time_scale,
                           len(cloud), len(queries), spatial, temporal, combined, query)


def batch_geometry(geoms: Sequence[ExampleGeometry]) -> ExampleGeometry:
    sizes = [g.num_points for g in geoms]

    def cat(attr):
        blocks = [getattr(g, attr) for g in geoms]
        return None if blocks[0] is None else concat_neighborhoods(blocks, sizes)

    return ExampleGeometry(
        np.concatenate([g.locations for g in geoms]),
        np.concatenate([g.times for g in geoms]),
        sum(sizes), sum(g.num_queries for g in geoms),
        cat("spatial"), cat("temporal"), cat("combined"), cat("query"),
    )


# ------------------------------------------------------------------ forward


def _conv(params, features: Tensor, geom: ExampleGeometry, nb: Neighborhood) -> Tensor:
    if isinstance(params, DeepSetsParams):
        return deepsets_apply(features, geom.locations, geom.times, nb, params)
    return pointconv_apply(features, nb, params)


def tpc_layer_apply(features: Tensor, geom: ExampleGeometry, params: TPCLayerParams) -> Tensor:
    if features.shape[1] != params.f_in:
        raise ag.ShapeError("tpc_layer", features.shape, (params.f_in,))
    if params.temporal is None:
        o_c = _conv(params.spatial, features, geom, geom.combined)
        return params.f(ag.concat([features, o_c], axis=-1))
    o_s = _conv(params.spatial, features, geom, geom.spatial)
    res = ag.concat([features, o_s], axis=-1)
    o_t = _conv(params.temporal, res, geom, geom.temporal)
    return params.f(ag.concat([res, o_t], axis=-1))


def forward_geometry(model: ModelParams, features: Tensor, geom: ExampleGeometry) -> Tensor:
    x = features
    for layer in model.layers:
        x = tpc_layer_apply(x, geom, layer)
    y = _conv(model.query, x, geom, geom.query)
    return model.g(y)


def _features_tensor(cloud: PointCloud, features: Tensor | None) -> Tensor:
    return features if features is not None else Tensor(cloud.features.astype(ag.default_dtype()))


def tpc_layer(cloud: PointCloud, params: TPCLayerParams, config: ModelConfig,
              features: Tensor | None = None) -> Tensor:
    """One layer over ``cloud``; returns the (N, F_out) updated features."""
    geom = build_geometry(cloud, QuerySet(cloud.locations[:1], cloud.times[:1], cloud.entity_ids[:1]), config)
    return tpc_layer_apply(_features_tensor(cloud, features), geom, params)


def forward(model: ModelParams, cloud: PointCloud, queries: QuerySet,
            features: Tensor | None = None) -> Tensor:
    """Predictions (|Q|, target_dim) for the queries given the input cloud."""
    geom = build_geometry(cloud, queries, model.config)
    return forward_geometry(model, _features_tensor(cloud, features), geom)


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path: str | Path, model: ModelParams, stats: dict | None = None,
                    meta: dict | None = None) -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA,
        "config": model.config.to_dict(),
        "parameters": [
            {"name": name, "shape": list(p.shape), "values": p.data.astype(float).reshape(-1).tolist()}
            for name, p in model.named_parameters()
        ],
        "normalization": stats,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    model = init_model(ModelConfig.from_dict(doc["config"]), seed=0)
    by_name = dict(model.named_parameters())
    stored = {entry["name"]: entry for entry in doc["parameters"]}
    if set(stored) != set(by_name):
        raise ValueError("checkpoint parameters do not match the model layout")
    for name, p in by_name.items():
        entry = stored[name]
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.data.dtype)
    return model, doc.get("normalization"), doc.get("meta", {})
