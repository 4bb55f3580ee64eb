#!/usr/bin/env python3
"""Train on clean data, then measure error as evil-twin rogues are added one by one.

    python3 scripts/rogue_sweep.py configs/rogue_scenario.toml --epochs 100
"""

import argparse
from dataclasses import replace
from pathlib import Path

from sentinel import dataset as ds
from sentinel.evaluation import evaluate, train_localizer
from sentinel.synthgen import load_scenario


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("scenario", type=Path)
    p.add_argument("--train-device", default="MOTO")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    scenario = load_scenario(args.scenario)
    clean = replace(scenario, buildings=tuple(replace(b, rogues=b.rogues.first(0)) for b in scenario.buildings))
    db = clean.generate()
    train_fps, _ = ds.split(db, ds.SplitSpec(args.train_device), args.seed)
    locs = {
        b: train_localizer(db.building(b), [fp for fp in train_fps if fp.building_id == b], "NONE", {"epochs": args.epochs}, {}, args.seed)
        for b in db.buildings
    }
    max_rogues = max(b.rogues.rogue_count for b in scenario.buildings)
    for k in range(max_rogues + 1):
        attacked = replace(scenario, buildings=tuple(replace(b, rogues=b.rogues.first(k)) for b in scenario.buildings))
        _, test = ds.split(attacked.generate(), ds.SplitSpec(args.train_device), args.seed)
        print(f"{k} rogue(s): mean error {evaluate(locs, test).mean:.3f} m")


if __name__ == "__main__":
    main()
