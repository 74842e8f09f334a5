"""Command-line front end.

    tpconv gen --config run.json --out data/
    tpconv train --config run.json --out runs/a
    tpconv eval --checkpoint runs/a/checkpoint.json --config run.json
    tpconv gradcheck --config run.json
    tpconv dist-grid --config run.json --out runs/grid --jobs 4
    tpconv ablate-combined --config run.json --out runs/ablation
    tpconv anomaly --checkpoint runs/a/checkpoint.json --config run.json --out runs/a

Every output file records the hash of the effective configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import experiments as ex
from .config import ConfigError, RunConfig, TASK_DIMS, plain
from .datagen import generate_episodes, write_csv
from .geometry import PointCloud, QuerySet
from .model import forward, init_model, load_checkpoint, save_checkpoint
from .training import NormalizationStats, evaluate, get_task, weather_loss

SCHEMA_VERSION = 1
log = logging.getLogger("tpconv")


# ------------------------------------------------------------------ output helpers


def _header(cfg: RunConfig, kind: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "config_hash": cfg.config_hash(),
            "seed": cfg.seed, "task": cfg.task, "precision": cfg.precision}


def write_json(path: Path, cfg: RunConfig, kind: str, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**_header(cfg, kind), **plain(payload)}, indent=2, sort_keys=True) + "\n")


def write_csv_table(path: Path, cfg: RunConfig, columns: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k, v in _header(cfg, path.stem).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_jsonl(path: Path, cfg: RunConfig, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    head = _header(cfg, "metrics_stream")
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"config_hash": head["config_hash"], **plain(rec)}, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_gen(cfg: RunConfig, out: Path) -> dict:
    datasets = ex.build_datasets(cfg)
    train_ids = sorted({e.episode_id for e in datasets.split.train + datasets.split.val})
    episodes = generate_episodes(datasets.spec)
    comments = [f"config_hash={cfg.config_hash()}", f"seed={cfg.seed}", f"schema_version={SCHEMA_VERSION}"]
    out.mkdir(parents=True, exist_ok=True)
    write_csv(episodes, out / "train_episodes.csv", comments)
    if datasets.test_episodes:
        write_csv(datasets.test_episodes, out / "test_episodes.csv", comments)
    summary = {"train_episodes": len(train_ids), "test_episodes": len(datasets.test_episodes),
               "train_examples": len(datasets.split.train), "val_examples": len(datasets.split.val),
               "test_examples": len(datasets.test), "dataset_spec": datasets.spec}
    write_json(out / "dataset.json", cfg, "dataset", summary)
    return summary


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    run = ex.run_training(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", run.model, run.stats.to_dict(),
                    {"task": cfg.task, "config_hash": cfg.config_hash(), "seed": cfg.seed,
                     "schema_version": SCHEMA_VERSION})
    write_jsonl(out / "metrics.jsonl", cfg, run.history)
    write_csv_table(out / "curve.csv", cfg, ["step", "lr", "train_loss", "val_loss"],
                    [[h["step"], h["lr"], h["train_loss"], h["val_loss"]] for h in run.history])
    summary = {"val": _metrics(run.val), "test": _metrics(run.test) if run.test else None,
               "num_parameters": run.model.num_parameters()}
    write_json(out / "summary.json", cfg, "train_summary", summary)
    return summary


def _metrics(m) -> dict:
    return {"total": m.total, "total_ci95": m.total_ci95, "means": m.means, "ci95": m.ci95, "counts": m.counts}


def _load_compatible(checkpoint: Path, cfg: RunConfig):
    model, stats, meta = load_checkpoint(checkpoint)
    in_dim, target_dim = TASK_DIMS[cfg.task]
    if meta.get("task", cfg.task) != cfg.task or model.config.in_dim != in_dim \
            or model.config.target_dim != target_dim:
        raise ConfigError(f"checkpoint {checkpoint} (task {meta.get('task')!r}) does not fit task {cfg.task!r}")
    if stats is None:
        raise ConfigError(f"checkpoint {checkpoint} carries no normalization statistics")
    return model, NormalizationStats.from_dict(stats)


def cmd_eval(cfg: RunConfig, checkpoint: Path | None, out: Path | None, split: str = "test") -> dict:
    ag.set_precision(cfg.precision)
    datasets = ex.build_datasets(cfg)
    task = get_task(cfg.task)
    if checkpoint is None:
        model = init_model(ex.resolved_model_config(cfg, datasets), cfg.seed)
        stats = task.fit_stats(datasets.split.train)
    else:
        model, stats = _load_compatible(checkpoint, cfg)
    examples = {"test": datasets.test, "val": datasets.split.val, "train": datasets.split.train}[split]
    metrics = _metrics(evaluate(model, examples, task, stats))
    result = {"split": split, "checkpoint": str(checkpoint) if checkpoint else None, **metrics}
    if out is not None:
        write_json(out / f"eval_{split}.json", cfg, "eval", result)
    return result


def micro_grad_check(cfg: RunConfig, jitter: float = 0.5):
    """Finite-difference check of a two-layer micro model (16 points, k=4).

    Every parameter gets N(0, jitter) added to its init. In a net this small
    the init leaves some ReLU inputs within h of zero, where central
    differences straddle the kink, and some gradients near the roundoff floor.
    """
    ag.set_precision("double")
    rng = np.random.default_rng(cfg.seed)
    n, in_dim = 16, TASK_DIMS[cfg.task][0]
    entity = cfg.task == "entity"
    cloud = PointCloud(rng.uniform(0, 2, (n, 2)), rng.integers(-3, 1, n).astype(float),
                       rng.normal(size=(n, in_dim)), np.arange(n) % 4 if entity else None)
    queries = QuerySet(rng.uniform(0, 2, (3, 2)), np.ones(3) if entity else np.zeros(3),
                       np.arange(3) if entity else None)
    mcfg = cfg.model_config(k=4, latent_sizes=(4, 4), encoder_hidden=(6, 6), weight_hidden=(6,), c_mid=3,
                            query_latent=5, decoder_hidden=(6,), deepsets_hidden=(6, 6, 6),
                            eps_t=1.0, eps_s=1.0, target_dim=2)
    model = init_model(mcfg, cfg.seed)
    for p in model.parameters():
        p.data = p.data + rng.normal(0.0, jitter, p.shape)
    target = rng.normal(size=(3, 2))
    report = ag.grad_check(lambda: weather_loss(forward(model, cloud, queries), target), model.parameters())
    return report, model


def cmd_gradcheck(cfg: RunConfig, out: Path | None) -> dict:
    report, model = micro_grad_check(cfg)
    result = {"max_rel_error": report.max_rel_error, "tolerance": report.tol, "passed": report.passed,
              "num_parameters": model.num_parameters(), "per_parameter": report.per_param}
    if out is not None:
        write_json(out / "gradcheck.json", cfg, "gradcheck", result)
    return result


def cmd_dist_grid(cfg: RunConfig, out: Path, jobs: int = 1) -> dict:
    grid = ex.input_distribution_grid(cfg, jobs=jobs)
    qgrid = ex.query_distribution_grid(cfg, jobs=jobs)
    names = grid["names"]
    write_csv_table(out / "input_grid.csv", cfg, ["trained_on"] + [f"eval_{n}" for n in names],
                    [[n] + row for n, row in zip(names, grid["loss"])])
    write_csv_table(out / "query_grid.csv", cfg, ["offset"] + list(qgrid["loss"]),
                    [[t] + [qgrid["loss"][n][i] for n in qgrid["loss"]] for i, t in enumerate(qgrid["offsets"])])
    result = {"input_grid": grid, "query_grid": qgrid}
    write_json(out / "dist_grid.json", cfg, "dist_grid", result)
    return result


def cmd_ablate_combined(cfg: RunConfig, out: Path, jobs: int = 1) -> dict:
    losses = ex.ablate_combined(cfg, jobs=jobs)
    write_csv_table(out / "ablation.csv", cfg, ["variant", "val_loss"], list(losses.items()))
    write_json(out / "ablation.json", cfg, "ablation", {"val_loss": losses})
    return losses


def cmd_anomaly(cfg: RunConfig, checkpoint: Path, out: Path) -> dict:
    ag.set_precision(cfg.precision)
    model, stats = _load_compatible(checkpoint, cfg)
    datasets = ex.build_datasets(cfg)
    run = ex.RunResult(model, stats, [], None, None, datasets)
    roc = ex.anomaly_roc(run, cfg)
    write_csv_table(out / "roc.csv", cfg, ["fpr", "tpr"], roc.rows())
    result = {"auroc": roc.auroc, "points": len(roc.fpr), "anomaly": ex.anomaly_config(cfg)}
    write_json(out / "anomaly.json", cfg, "anomaly", result)
    return result


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tpconv", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, checkpoint=False, jobs=False, split=False):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, required=True)
        s.add_argument("--out", type=Path, default=None)
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        s.add_argument("--precision", choices=("single", "double"), default=None)
        if checkpoint:
            s.add_argument("--checkpoint", type=Path, required=name == "anomaly")
        if jobs:
            s.add_argument("--jobs", type=int, default=1)
        if split:
            s.add_argument("--split", choices=("train", "val", "test"), default="test")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    add("gen")
    add("train")
    add("eval", checkpoint=True, split=True)
    add("gradcheck")
    add("dist-grid", jobs=True)
    add("ablate-combined", jobs=True)
    add("anomaly", checkpoint=True)
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.precision is not None:
        doc = cfg.to_dict()
        doc["precision"] = args.precision
        cfg = RunConfig.from_dict(doc)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args)
        out = args.out or (Path(cfg.out) if cfg.out else None)
        if out is None and args.command in ("gen", "train", "dist-grid", "ablate-combined", "anomaly"):
            raise ConfigError("no output directory: pass --out or set 'out' in the config")
        if args.command == "gen":
            result = cmd_gen(cfg, out)
        elif args.command == "train":
            result = cmd_train(cfg, out)
        elif args.command == "eval":
            result = cmd_eval(cfg, args.checkpoint, out, args.split)
        elif args.command == "gradcheck":
            result = cmd_gradcheck(cfg, out)
        elif args.command == "dist-grid":
            result = cmd_dist_grid(cfg, out, args.jobs)
        elif args.command == "ablate-combined":
            result = cmd_ablate_combined(cfg, out, args.jobs)
        else:
            result = cmd_anomaly(cfg, args.checkpoint, out)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(json.dumps(plain(result), indent=2, sort_keys=True, default=str))
    if args.command == "gradcheck" and not result["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
