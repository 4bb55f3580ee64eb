#!/usr/bin/env python3
"""Run a full experiment config and print the headline numbers.

    python3 scripts/run_experiment.py configs/acceptance.toml --out runs/acceptance
"""

import argparse
import json
import logging
import time
from pathlib import Path

from sentinel.evaluation import ExperimentConfig, run_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--retrain", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    start = time.perf_counter()
    summary = run_experiment(ExperimentConfig.load(args.config), args.out, args.jobs, not args.retrain)
    print(json.dumps({k: summary[k] for k in ("clean_mean_m", "attacked_mean_m", "ratio_none_over_variant")}, indent=2))
    print(f"done in {(time.perf_counter() - start) / 60:.1f} min; reports in {args.out}")


if __name__ == "__main__":
    main()
