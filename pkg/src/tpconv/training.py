"""Normalization, task losses, the training loop and evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import LRSchedule, OptimizerState, Tape, Tensor, adam_step, cosine_lr
from .datagen import TrainingExample
from .model import (ExampleGeometry, ModelParams, batch_geometry, build_geometry,
                    forward_geometry)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ------------------------------------------------------------------ normalization


@dataclass
class NormalizationStats:
    """Per-attribute 10th/90th percentiles fitted on training data only."""

    p10: np.ndarray
    p90: np.ndarray

    def __post_init__(self):
        self.p10 = np.asarray(self.p10, dtype=float)
        self.p90 = np.asarray(self.p90, dtype=float)

    @property
    def degenerate(self) -> np.ndarray:
        return ~(self.p90 > self.p10)

    @classmethod
    def fit(cls, values: np.ndarray) -> "NormalizationStats":
        values = np.asarray(values, dtype=float)
        p10, p90 = [], []
        for col in values.T:
            col = col[np.isfinite(col)]
            if len(col) == 0:
                p10.append(0.0)
                p90.append(0.0)
            else:
                p10.append(np.percentile(col, 10))
                p90.append(np.percentile(col, 90))
        stats = cls(np.array(p10), np.array(p90))
        if stats.degenerate.any():
            log.warning("degenerate attributes %s normalised by identity", np.flatnonzero(stats.degenerate).tolist())
        return stats

    def _shift_scale(self):
        deg = self.degenerate
        return np.where(deg, 0.0, self.p10), np.where(deg, 1.0, self.p90 - self.p10)

    def to_dict(self) -> dict:
        return {"p10": self.p10.tolist(), "p90": self.p90.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(d["p10"], d["p90"])


def normalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    shift, scale = stats._shift_scale()
    return (np.asarray(values, float) - shift) / scale


def denormalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    shift, scale = stats._shift_scale()
    return np.asarray(values, float) * scale + shift


# ------------------------------------------------------------------ losses


def weather_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum over attributes of the mean (over queries) squared error."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise ag.ShapeError("weather_loss", pred.shape, target.shape)
    n = max(pred.shape[0], 1)
    return ag.mul(ag.sum_reduce(ag.square(ag.sub(pred, target))), 1.0 / n)


ENTITY_POS = [0, 1]
ENTITY_HEALTH = 2
ENTITY_SHIELD = 3
ENTITY_ORIENT = slice(4, 12)
ENTITY_ALIVE = 12


def entity_loss_terms(pred: Tensor, target: np.ndarray, alive_truth: np.ndarray,
                      orientation_bins: int = 8) -> dict[str, Tensor]:
    """Alive cross-entropy over all rows; property terms averaged over alive rows.

    ``pred`` columns: x, y, health, shield, orientation logits, alive logit.
    ``target`` columns: x, y, health, shield, orientation bin (NaN/-1 when dead).
    """
    n = pred.shape[0]
    if pred.shape[1] != 5 + orientation_bins or target.shape[0] != n or alive_truth.shape != (n,):
        raise ag.ShapeError("entity_loss", pred.shape, target.shape, alive_truth.shape)
    dtype = pred.data.dtype
    alive = np.asarray(alive_truth, dtype=bool)
    n_alive = int(alive.sum())
    w = (alive / max(n_alive, 1)).astype(dtype)
    numeric = np.where(alive[:, None], np.nan_to_num(target[:, :4]), 0.0).astype(dtype)
    labels = np.where(alive, np.nan_to_num(target[:, 4], nan=0.0), 0).astype(np.intp)

    pos = ag.take_columns(pred, ENTITY_POS)
    pos_err = ag.mul(ag.sum_reduce(ag.square(ag.sub(pos, numeric[:, :2])), axis=1), 0.5)
    terms = {
        "position": ag.sum_reduce(ag.mul(pos_err, w)),
        "health": ag.sum_reduce(ag.mul(ag.square(ag.sub(ag.take_columns(pred, [ENTITY_HEALTH]),
                                                        numeric[:, 2:3])), w[:, None])),
        "shield": ag.sum_reduce(ag.mul(ag.square(ag.sub(ag.take_columns(pred, [ENTITY_SHIELD]),
                                                        numeric[:, 3:4])), w[:, None])),
        "orientation": ag.sum_reduce(ag.mul(ag.softmax_xent(
            ag.take_columns(pred, slice(4, 4 + orientation_bins)), labels), w)),
        "alive": ag.mean_reduce(ag.sigmoid_xent(ag.reshape(ag.take_columns(pred, [4 + orientation_bins]), (n,)),
                                                alive.astype(dtype))),
    }
    return terms


def entity_loss(pred: Tensor, target: np.ndarray, alive_truth: np.ndarray) -> Tensor:
    terms = entity_loss_terms(pred, target, alive_truth)
    total = terms["alive"]
    for name in ("position", "health", "shield", "orientation"):
        total = ag.add(total, terms[name])
    return total


# ------------------------------------------------------------------ tasks


class Task:
    """Feature encoding, target normalization and loss for one problem."""

    name: str
    in_dim: int
    target_dim: int
    columns: tuple[str, ...]

    def fit_stats(self, examples: Sequence[TrainingExample]) -> NormalizationStats:
        raise NotImplementedError

    def features(self, ex: TrainingExample, stats: NormalizationStats) -> np.ndarray:
        raise NotImplementedError

    def loss(self, pred: Tensor, targets: np.ndarray, stats: NormalizationStats) -> Tensor:
        raise NotImplementedError

    def query_errors(self, pred: np.ndarray, targets: np.ndarray, stats: NormalizationStats) -> dict:
        """Per-query error arrays by column, plus ``total`` (normalised)."""
        raise NotImplementedError


class WeatherTask(Task):
    name = "weather"
    in_dim = 4
    target_dim = 4
    columns = ("humidity", "temperature", "wind_speed", "pressure")

    def fit_stats(self, examples):
        vals = [ex.targets for ex in examples] + [ex.cloud.features for ex in examples]
        return NormalizationStats.fit(np.concatenate(vals))

    def features(self, ex, stats):
        return normalize(ex.cloud.features, stats)

    def loss(self, pred, targets, stats):
        return weather_loss(pred, normalize(targets, stats))

    def query_errors(self, pred, targets, stats):
        sq_norm = (pred - normalize(targets, stats)) ** 2
        raw = (denormalize(pred, stats) - targets) ** 2
        out = {c: raw[:, i] for i, c in enumerate(self.columns)}
        out["total"] = sq_norm.sum(1)
        return out

    def anomaly_scores(self, pred, targets, stats):
        return ((pred - normalize(targets, stats)) ** 2).sum(1)


class EntityTask(Task):
    name = "entity"
    orientation_bins = 8
    n_types = 3
    in_dim = 2 + 1 + 3 + 2 + 8
    target_dim = 4 + 8 + 1
    columns = ("position", "health", "shield", "orientation", "alive")

    def fit_stats(self, examples):
        vals = np.concatenate([ex.targets[:, :4] for ex in examples])
        vals = vals[np.isfinite(vals).all(1)]
        stats = NormalizationStats.fit(vals)
        # health and shield already live in [0, 1]
        stats.p10[2:4] = 0.0
        stats.p90[2:4] = 1.0
        return stats

    def _pos_stats(self, stats):
        return NormalizationStats(stats.p10[:2], stats.p90[:2])

    def features(self, ex, stats):
        raw = ex.cloud.features
        n = len(raw)
        pos = normalize(ex.cloud.locations, self._pos_stats(stats))
        team = np.where(raw[:, 0] > 0.5, 1.0, -1.0)[:, None]
        utype = np.zeros((n, self.n_types))
        utype[np.arange(n), raw[:, 1].astype(int)] = 1.0
        orient = np.zeros((n, self.orientation_bins))
        orient[np.arange(n), raw[:, 4].astype(int)] = 1.0
        return np.concatenate([pos, team, utype, raw[:, 2:4], orient], axis=1)

    def normalized_targets(self, targets, stats):
        t = targets.copy()
        t[:, :4] = normalize(targets[:, :4], stats)
        return t

    def loss(self, pred, targets, stats):
        return entity_loss(pred, self.normalized_targets(targets, stats), targets[:, 5] > 0.5)

    def query_errors(self, pred, targets, stats):
        t = self.normalized_targets(targets, stats)
        alive = targets[:, 5] > 0.5
        logits = pred[:, 4:12]
        z = logits - logits.max(1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        labels = np.where(alive, np.nan_to_num(t[:, 4]), 0).astype(int)
        x = pred[:, 12]
        dead = np.where(alive, 0.0, np.nan)
        return {
            "position": ((pred[:, :2] - np.nan_to_num(t[:, :2])) ** 2).mean(1) + dead,
            "health": (pred[:, 2] - np.nan_to_num(t[:, 2])) ** 2 + dead,
            "shield": (pred[:, 3] - np.nan_to_num(t[:, 3])) ** 2 + dead,
            "orientation": -logp[np.arange(len(labels)), labels] + dead,
            "alive": np.maximum(x, 0) - x * alive + np.log1p(np.exp(-np.abs(x))),
        }

    def per_query_total(self, cols: dict) -> np.ndarray:
        # alive term over every row, property terms averaged over alive rows:
        # total = mean_r [bce_r + (n / n_alive) * property_r]
        alive = np.isfinite(cols["position"])
        n, n_alive = len(alive), max(int(alive.sum()), 1)
        prop = sum(np.nan_to_num(cols[c]) for c in ("position", "health", "shield", "orientation"))
        return cols["alive"] + prop * (n / n_alive)


TASKS = {"weather": WeatherTask, "entity": EntityTask}


def get_task(name: str) -> Task:
    try:
        return TASKS[name]()
    except KeyError:
        raise ValueError(f"unknown task {name!r}") from None


# ------------------------------------------------------------------ batching


def example_geometry(ex: TrainingExample, model: ModelParams) -> ExampleGeometry:
    c = model.config
    key = (c.eps_t, c.eps_s, c.k, c.temporal_kind, c.query_kind, c.combined, c.tradeoff, c.spatial_include_dt,
           c.space_scale, c.time_scale)
    geom = ex.cache.get(key)
    if geom is None:
        geom = build_geometry(ex.cloud, ex.queries, c)
        ex.cache[key] = geom
    return geom


@dataclass
class Batch:
    features: np.ndarray
    geometry: ExampleGeometry
    targets: np.ndarray
    query_counts: list[int]


def make_batch(examples: Sequence[TrainingExample], model: ModelParams, task: Task,
               stats: NormalizationStats) -> Batch:
    geoms = [example_geometry(ex, model) for ex in examples]
    feats = np.concatenate([task.features(ex, stats) for ex in examples])
    return Batch(feats, batch_geometry(geoms), np.concatenate([ex.targets for ex in examples]),
                 [len(ex.queries) for ex in examples])


def predict_batch(model: ModelParams, batch: Batch) -> Tensor:
    dtype = model.g.weights[0].data.dtype
    return forward_geometry(model, Tensor(batch.features.astype(dtype)), batch.geometry)


def predict(model: ModelParams, examples: Sequence[TrainingExample], task: Task,
            stats: NormalizationStats, batch_size: int = 64) -> list[np.ndarray]:
    """Normalised-space predictions, one array per example."""
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = make_batch(chunk, model, task, stats)
        pred = predict_batch(model, batch).data.astype(np.float64)
        out += np.split(pred, np.cumsum(batch.query_counts)[:-1])
    return out


# ------------------------------------------------------------------ metrics


@dataclass
class Metrics:
    means: dict[str, float]
    ci95: dict[str, float]
    counts: dict[str, int]
    total: float
    total_ci95: float
    history: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def mean_ci(values: np.ndarray) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width (population sd)."""
    values = np.asarray(values, float)
    if len(values) == 0:
        return float("nan"), float("nan")
    return float(values.mean()), float(1.96 * values.std() / math.sqrt(len(values)))


def evaluate(model: ModelParams, examples: Sequence[TrainingExample], task: Task,
             stats: NormalizationStats, predictions: Sequence[np.ndarray] | None = None) -> Metrics:
    if len(examples) == 0:
        raise ValueError("evaluate: empty dataset")
    preds = predictions if predictions is not None else predict(model, examples, task, stats)
    per_col: dict[str, list] = {}
    for ex, p in zip(examples, preds):
        for name, arr in task.query_errors(p, ex.targets, stats).items():
            per_col.setdefault(name, []).append(arr)
    cols = {k: np.concatenate(v) for k, v in per_col.items()}
    totals = cols.pop("total") if "total" in cols else task.per_query_total(cols)
    means, ci, counts = {}, {}, {}
    for name, arr in cols.items():
        arr = arr[np.isfinite(arr)]
        means[name], ci[name] = mean_ci(arr)
        counts[name] = int(len(arr))
    total, total_ci = mean_ci(totals)
    return Metrics(means, ci, counts, total, total_ci)


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-7
    cycles: int = 3
    seed: int = 0
    val_fraction: float = 0.2
    evals_per_epoch: int = 10
    val_subset: int = 256
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")


TASK_LR = {"weather": (1e-3, 1e-7), "entity": (1e-3, 1e-6)}


@dataclass
class DatasetSplit:
    train: list[TrainingExample]
    val: list[TrainingExample]


def split_by_episode(examples: Sequence[TrainingExample], val_fraction: float, seed: int = 0) -> DatasetSplit:
    """Assign whole episodes to train or validation."""
    episodes = sorted({ex.episode_id for ex in examples})
    rng = np.random.default_rng([seed, 104729])
    rng.shuffle(episodes)
    n_val = max(1, int(round(val_fraction * len(episodes)))) if val_fraction > 0 else 0
    if n_val >= len(episodes):
        raise ValueError("validation split would leave no training episodes")
    val_eps = set(episodes[:n_val])
    return DatasetSplit([ex for ex in examples if ex.episode_id not in val_eps],
                        [ex for ex in examples if ex.episode_id in val_eps])


@dataclass
class TrainResult:
    model: ModelParams
    stats: NormalizationStats
    history: list[dict]
    best_val: float
    metrics: Metrics | None = None


def _val_loss(model, examples, task, stats, batch_size) -> float:
    total, n = 0.0, 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = make_batch(chunk, model, task, stats)
        loss = task.loss(predict_batch(model, batch), batch.targets, stats)
        total += float(loss.data) * len(chunk)
        n += len(chunk)
    return total / n


def train(model: ModelParams, split: DatasetSplit, task: Task, config: TrainConfig,
          stats: NormalizationStats | None = None) -> TrainResult:
    """Adam + cosine warm restarts; keeps the best-validation parameters."""
    if not split.train:
        raise ValueError("train: empty training split")
    train_eps = {ex.episode_id for ex in split.train}
    if any(ex.episode_id in train_eps for ex in split.val):
        raise ValueError("train: validation examples share episodes with training examples")
    stats = stats or task.fit_stats(split.train)
    params = model.parameters()
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng([config.seed, 15485863])
    n_batches = math.ceil(len(split.train) / config.batch_size)
    total_steps = n_batches * config.epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    schedule = LRSchedule(config.lr_max, config.lr_min, total_steps, config.cycles)
    val_set = split.val[:config.val_subset]
    eval_every = max(1, n_batches // max(config.evals_per_epoch, 1))

    history: list[dict] = []
    best_val = math.inf
    best = [p.data.copy() for p in params]
    running, running_n = 0.0, 0
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(split.train))
        for b in range(n_batches):
            if step >= total_steps:
                break
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = make_batch([split.train[i] for i in idx], model, task, stats)
            lr = cosine_lr(step, schedule)
            with Tape() as tape:
                loss = task.loss(predict_batch(model, batch), batch.targets, stats)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step} (lr={lr:.3g}, epoch {epoch}, batch {b})")
            tape.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
            running += value
            running_n += 1
            step += 1
            if val_set and (step % eval_every == 0 or step == total_steps):
                val = _val_loss(model, val_set, task, stats, 64)
                history.append({"step": step, "epoch": epoch, "lr": lr,
                                "train_loss": running / running_n, "val_loss": val})
                running, running_n = 0.0, 0
                if val < best_val:
                    best_val = val
                    best = [p.data.copy() for p in params]
                log.info("step %d lr %.2e train %.4f val %.4f", step, lr, history[-1]["train_loss"], val)
        if step >= total_steps:
            break
    if val_set:
        for p, data in zip(params, best):
            p.data = data
    return TrainResult(model, stats, history, best_val)
