"""End-to-end experiment drivers shared by the CLI, scripts and acceptance tests.

Every driver is a pure function of a :class:`RunConfig` (plus a seed): data
are regenerated from seeds, so repeated calls reproduce results exactly.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .anomaly import AnomalyConfig, RocCurve, inject, roc_auc, score
from .config import INPUT_DISTRIBUTIONS, QUERY_DISTRIBUTIONS, RunConfig, offset_distribution
from .datagen import (DatasetSpec, Episode, OffsetDistribution, TrainingExample, examples_from_episodes,
                      generate_episodes, hold_out_stations, load_csv, station_radius)
from .model import ModelParams, init_model
from .training import (DatasetSplit, Metrics, NormalizationStats, TrainResult, evaluate, get_task,
                       split_by_episode, train)

log = logging.getLogger(__name__)


@dataclass
class Datasets:
    split: DatasetSplit
    test: list[TrainingExample]
    test_episodes: list[Episode]
    spec: DatasetSpec
    train_episodes: list[Episode] = field(default_factory=list, repr=False)


@dataclass
class RunResult:
    model: ModelParams
    stats: NormalizationStats
    history: list[dict]
    val: Metrics
    test: Metrics | None
    datasets: Datasets = field(repr=False)
    seconds: float = 0.0


def dataset_spec(cfg: RunConfig) -> DatasetSpec:
    d = cfg.data
    return DatasetSpec(cfg.task, d.n_episodes, d.examples_per_episode, d.seed, cfg.history(), cfg.query(),
                       cfg.field_spec(), cfg.entity_spec(), d.target_fraction)


def build_datasets(cfg: RunConfig, history: OffsetDistribution | None = None,
                   query: OffsetDistribution | None = None) -> Datasets:
    """Train/validation examples from the first ``n_episodes`` episodes and a
    test set from ``test_episodes`` further episodes."""
    spec = dataset_spec(cfg)
    if cfg.data.csv is not None:
        kind = "field" if cfg.task == "weather" else "entity"
        episodes = load_csv(cfg.data.csv, kind)
        n_test = min(cfg.data.test_episodes, len(episodes) - 1)
        train_eps, test_eps = episodes[:len(episodes) - n_test], episodes[len(episodes) - n_test:]
    else:
        train_eps = generate_episodes(spec)
        test_spec = DatasetSpec(**{**spec.__dict__, "n_episodes": cfg.data.test_episodes})
        test_eps = generate_episodes(test_spec, first_id=spec.n_episodes)
    examples = examples_from_episodes(train_eps, spec, history, query)
    split = split_by_episode(examples, cfg.data.val_fraction, cfg.data.seed)
    test = examples_from_episodes(test_eps, spec, history, query) if test_eps else []
    return Datasets(split, test, test_eps, spec, train_eps)


def data_overrides(cfg: RunConfig, datasets: Datasets) -> dict:
    """Model settings derived from the data: ``eps_s: "auto"`` becomes the
    radius at which the average station has ``k`` neighbors."""
    if cfg.model.get("eps_s") != "auto":
        return {}
    k = cfg.model.get("k", 8)
    return {"eps_s": station_radius(datasets.train_episodes, k)}


def resolved_model_config(cfg: RunConfig, datasets: Datasets, **overrides):
    return cfg.model_config(**{**data_overrides(cfg, datasets), **overrides})


def run_training(cfg: RunConfig, datasets: Datasets | None = None, **model_overrides) -> RunResult:
    """Train one model on ``cfg`` and evaluate it on validation and test data."""
    start = time.perf_counter()
    ag.set_precision(cfg.precision)
    datasets = datasets or build_datasets(cfg)
    task = get_task(cfg.task)
    mcfg = resolved_model_config(cfg, datasets, **model_overrides)
    model = init_model(mcfg, cfg.seed)
    tcfg = cfg.train_config(baseline=mcfg.baseline)
    result: TrainResult = train(model, datasets.split, task, tcfg)
    val = evaluate(model, datasets.split.val, task, result.stats)
    val.history = result.history
    test = evaluate(model, datasets.test, task, result.stats) if datasets.test else None
    return RunResult(model, result.stats, result.history, val, test, datasets, time.perf_counter() - start)


# ------------------------------------------------------------------ multi-seed protocols


def baseline_comparison(cfg: RunConfig, seeds, baselines=("pointconv", "deepsets"),
                        anomaly: bool = False) -> list[dict]:
    """Per seed: fresh data, one run per baseline on the same data.

    Each record holds validation totals, run times, optionally AUROC, and the
    runs themselves under ``runs``.
    """
    records = []
    for seed in seeds:
        cfg_s = cfg.with_seed(seed)
        datasets = build_datasets(cfg_s)
        runs = {b: run_training(cfg_s, datasets, baseline=b) for b in baselines}
        rec = {"seed": seed, "val": {b: r.val.total for b, r in runs.items()},
               "seconds": {b: r.seconds for b, r in runs.items()}, "runs": runs}
        if anomaly:
            examples = anomaly_examples(datasets, seed)
            rec["auroc"] = {b: anomaly_roc(r, cfg_s, examples).auroc for b, r in runs.items()}
        log.info("seed %d: %s", seed, {k: v for k, v in rec.items() if k != "runs"})
        records.append(rec)
    return records


def robustness_study(cfg: RunConfig, seeds, fixed=("fixed1", "fixed2"), jobs: int = 1) -> list[dict]:
    """Per seed: relative loss increase of the uniform-trained model on the
    fixed distributions, and of each fixed-trained model on uniform (averaged)."""
    names = [*fixed, "uniform"]
    records = []
    for seed in seeds:
        grid = input_distribution_grid(cfg.with_seed(seed), names, jobs)
        uniform_off = relative_increase(grid, "uniform", list(fixed))
        fixed_off = float(np.mean([relative_increase(grid, f, ["uniform"]) for f in fixed]))
        records.append({"seed": seed, "grid": grid, "uniform_on_fixed": uniform_off,
                        "fixed_on_uniform": fixed_off})
        log.info("seed %d: uniform->fixed %+.3f, fixed->uniform %+.3f", seed, uniform_off, fixed_off)
    return records


# ------------------------------------------------------------------ distribution grids


def examples_for(datasets: Datasets, history=None, query=None, salt: int = 1) -> list[TrainingExample]:
    """Fresh evaluation examples from the test episodes under other offsets."""
    return examples_from_episodes(datasets.test_episodes, datasets.spec, history, query, seed_salt=salt)


def _map_cells(fn, cells: list[tuple], jobs: int) -> list:
    """Run independent grid cells, in worker processes when ``jobs > 1``."""
    if jobs <= 1 or len(cells) <= 1:
        return [fn(*c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
        return list(pool.map(fn, *zip(*cells)))


def _input_cell(cfg_doc: dict, trained: str, names: list[str]) -> list[float]:
    cfg = RunConfig.from_dict(cfg_doc)
    dists = {n: offset_distribution(INPUT_DISTRIBUTIONS[n]) for n in names}
    run = run_training(cfg, build_datasets(cfg, history=dists[trained]))
    task = get_task(cfg.task)
    row = [evaluate(run.model, examples_for(run.datasets, history=dists[m]), task, run.stats).total
           for m in names]
    log.info("input grid: trained on %s -> %s", trained, row)
    return row


def input_distribution_grid(cfg: RunConfig, names=None, jobs: int = 1) -> dict:
    """Train one model per input (history) distribution and evaluate each on all.

    Returns ``{"names": [...], "loss": matrix[train][eval]}``.
    """
    names = list(names or cfg.experiment.input_distributions)
    matrix = _map_cells(_input_cell, [(cfg.to_dict(), n, names) for n in names], jobs)
    return {"names": names, "loss": matrix}


def relative_increase(grid: dict, trained: str, evaluated: list[str]) -> float:
    """Mean of (loss off-distribution / loss on own distribution) - 1."""
    names, loss = grid["names"], np.asarray(grid["loss"])
    i = names.index(trained)
    own = loss[i, i]
    return float(np.mean([loss[i, names.index(m)] / own - 1.0 for m in evaluated]))


def _query_cell(cfg_doc: dict, trained: str, offsets: list[int]) -> list[float]:
    cfg = RunConfig.from_dict(cfg_doc)
    run = run_training(cfg, build_datasets(cfg, query=offset_distribution(QUERY_DISTRIBUTIONS[trained])))
    task, hist = get_task(cfg.task), cfg.history()
    row = [evaluate(run.model, examples_for(run.datasets, history=hist, query=OffsetDistribution("fixed", (t,))),
                    task, run.stats).total for t in offsets]
    log.info("query grid: trained on %s -> %s", trained, row)
    return row


def query_distribution_grid(cfg: RunConfig, names=None, jobs: int = 1) -> dict:
    """Train one model per query distribution; loss by query offset 1..max."""
    names = list(names or cfg.experiment.query_distributions)
    offsets = list(range(1, cfg.experiment.max_query_offset + 1))
    rows = _map_cells(_query_cell, [(cfg.to_dict(), n, offsets) for n in names], jobs)
    return {"offsets": offsets, "loss": dict(zip(names, rows))}


# ------------------------------------------------------------------ ablation


def _combined_cell(cfg_doc: dict, tradeoff: float | None) -> float:
    cfg = RunConfig.from_dict(cfg_doc)
    overrides = {} if tradeoff is None else {"combined": True, "tradeoff": float(tradeoff)}
    return run_training(cfg, **overrides).val.total


def ablate_combined(cfg: RunConfig, tradeoffs=None, separated: RunResult | None = None, jobs: int = 1) -> dict:
    """Validation loss of the separated model and of each combined-distance variant."""
    tradeoffs = list(tradeoffs or cfg.experiment.tradeoffs)
    cells = [(cfg.to_dict(), float(x)) for x in tradeoffs]
    if separated is None:
        cells.insert(0, (cfg.to_dict(), None))
    losses = _map_cells(_combined_cell, cells, jobs)
    if separated is not None:
        losses.insert(0, separated.val.total)
    out = {"separated": losses[0]}
    for x, loss in zip(tradeoffs, losses[1:]):
        out[f"combined_x={x:g}"] = loss
    return out


# ------------------------------------------------------------------ anomaly


def anomaly_config(cfg: RunConfig) -> AnomalyConfig:
    e = cfg.experiment
    return AnomalyConfig(e.anomaly_fraction, e.anomaly_magnitude, cfg.seed, e.anomaly_corrupt_context)


def anomaly_examples(datasets: Datasets, seed: int) -> list[TrainingExample]:
    """Test examples whose targets are held-out stations: a tenth of each test
    episode's stations, never part of any input cloud."""
    held = hold_out_stations(datasets.test_episodes, datasets.spec.target_fraction, seed)
    return examples_from_episodes(datasets.test_episodes, datasets.spec, seed_salt=2, held_out=held)


def anomaly_roc(run: RunResult, cfg: RunConfig, examples: list[TrainingExample] | None = None) -> RocCurve:
    """Inject faults into held-out test stations and threshold the prediction error."""
    if cfg.task != "weather":
        raise ValueError("anomaly detection is defined for the weather task")
    if examples is None:
        examples = anomaly_examples(run.datasets, cfg.seed)
    injected = inject(examples, anomaly_config(cfg))
    scores = score(run.model, injected.examples, get_task(cfg.task), run.stats)
    return roc_auc(scores, injected.flat_labels())
