"""Run the desk-scale comparisons over several seeds and write one JSON report.

    python scripts/run_experiments.py --out results/ [--seeds 0 1 2] [--only weather entity robustness ablation]

Takes about an hour on one CPU core with every study selected.
"""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from tpconv.config import RunConfig
from tpconv.experiments import ablate_combined, baseline_comparison, robustness_study

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
STUDIES = ("weather", "entity", "robustness", "ablation")


def summarize(records, metric):
    keys = records[0][metric]
    return {k: {"per_seed": [r[metric][k] for r in records],
                "mean": float(np.mean([r[metric][k] for r in records]))} for k in keys}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--only", nargs="+", choices=STUDIES, default=list(STUDIES))
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    weather = RunConfig.load(CONFIGS / "weather_desk.json")
    entity = RunConfig.load(CONFIGS / "entity_desk.json")
    report = {"seeds": args.seeds}

    if "weather" in args.only or "ablation" in args.only:
        records = baseline_comparison(weather, args.seeds, anomaly=True)
        report["weather"] = {"val": summarize(records, "val"), "auroc": summarize(records, "auroc"),
                             "seconds": summarize(records, "seconds")}
        if "ablation" in args.only:
            rows = [ablate_combined(weather.with_seed(r["seed"]), separated=r["runs"]["pointconv"], jobs=args.jobs)
                    for r in records]
            report["ablation"] = {k: {"per_seed": [row[k] for row in rows],
                                      "mean": float(np.mean([row[k] for row in rows]))} for k in rows[0]}
    if "entity" in args.only:
        records = baseline_comparison(entity, args.seeds)
        report["entity"] = {"val": summarize(records, "val"), "seconds": summarize(records, "seconds")}
    if "robustness" in args.only:
        records = robustness_study(entity, args.seeds, jobs=args.jobs)
        report["robustness"] = {
            "grids": [r["grid"] for r in records],
            "uniform_on_fixed": [r["uniform_on_fixed"] for r in records],
            "fixed_on_uniform": [r["fixed_on_uniform"] for r in records],
        }

    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "experiments.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(path)


if __name__ == "__main__":
    main()
