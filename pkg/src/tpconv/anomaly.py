"""Sensor-fault injection, prediction-error scoring and ROC analysis."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .datagen import TrainingExample
from .geometry import PointCloud


@dataclass(frozen=True)
class AnomalyConfig:
    """Which stations break and how.

    A selected station gets one property scaled by (1 + sign * magnitude)
    on all of its samples. ``corrupt_context`` also scales the station's
    samples where they appear as model input.
    """

    fraction: float = 0.33
    magnitude: float = 0.25
    seed: int = 0
    corrupt_context: bool = True

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.magnitude < 0:
            raise ValueError(f"magnitude must be >= 0, got {self.magnitude}")


@dataclass(frozen=True)
class Fault:
    prop: int
    factor: float


@dataclass
class InjectedSet:
    examples: list[TrainingExample]
    labels: list[np.ndarray]          # per example, one bool per query
    faults: dict[tuple[int, int], Fault]

    def flat_labels(self) -> np.ndarray:
        return np.concatenate(self.labels) if self.labels else np.zeros(0, bool)


def choose_faults(stations: Sequence[tuple[int, int]], n_props: int, config: AnomalyConfig) -> dict:
    """Pick the broken (episode, station) pairs, their property and sign."""
    keys = sorted(set(stations))
    n = int(round(config.fraction * len(keys)))
    if n == 0:
        raise ValueError(f"fraction {config.fraction} selects no station out of {len(keys)}")
    rng = np.random.default_rng([config.seed, 7919])
    chosen = rng.choice(len(keys), n, replace=False)
    props = rng.integers(0, n_props, n)
    signs = rng.choice([-1.0, 1.0], n)
    return {keys[i]: Fault(int(p), 1.0 + s * config.magnitude)
            for i, p, s in zip(sorted(chosen), props, signs)}


def _scale_rows(values: np.ndarray, ids: np.ndarray, episode: int, faults: dict) -> np.ndarray:
    out = values
    for row, sid in enumerate(ids):
        fault = faults.get((episode, int(sid)))
        if fault is None:
            continue
        if out is values:
            out = values.copy()
        out[row, fault.prop] = values[row, fault.prop] * fault.factor
    return out


def inject(examples: Sequence[TrainingExample], config: AnomalyConfig) -> InjectedSet:
    """Corrupt a fraction of stations; label every query of a broken station."""
    if not examples:
        raise ValueError("inject needs at least one example")
    if any(ex.task != "weather" for ex in examples):
        raise ValueError("inject applies to weather-task examples")
    stations = [(ex.episode_id, int(s)) for ex in examples for s in ex.queries.entity_ids]
    faults = choose_faults(stations, examples[0].targets.shape[1], config)
    out, labels = [], []
    for ex in examples:
        qids = ex.queries.entity_ids
        labels.append(np.array([(ex.episode_id, int(s)) in faults for s in qids]))
        targets = _scale_rows(ex.targets, qids, ex.episode_id, faults)
        cloud = ex.cloud
        if config.corrupt_context:
            feats = _scale_rows(cloud.features, cloud.entity_ids, ex.episode_id, faults)
            if feats is not cloud.features:
                cloud = PointCloud(cloud.locations, cloud.times, feats, cloud.entity_ids)
        if cloud is ex.cloud and targets is ex.targets:
            out.append(ex)
        else:
            out.append(replace(ex, cloud=cloud, targets=targets, cache={}))
    return InjectedSet(out, labels, faults)


def score(model, examples: Sequence[TrainingExample], task, stats, batch_size: int = 64) -> np.ndarray:
    """Per-query anomaly score: sum over properties of normalized squared error."""
    from .training import predict
    preds = np.concatenate(predict(model, examples, task, stats, batch_size))
    targets = np.concatenate([ex.targets for ex in examples])
    return task.anomaly_scores(preds, targets, stats)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray   # threshold[i] is the score cut giving point i+1
    auroc: float

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores, labels) -> RocCurve:
    """ROC from a threshold sweep over the distinct scores (high = anomalous).

    Equal scores form a single step, so ties contribute a diagonal segment.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tpr = np.r_[0.0, tp[last_of_group] / n_pos]
    fpr = np.r_[0.0, fp[last_of_group] / n_neg]
    auroc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, s[last_of_group], auroc)
