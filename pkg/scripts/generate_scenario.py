#!/usr/bin/env python3
"""Generate a synthetic fingerprint CSV and print per-building statistics.

    python3 scripts/generate_scenario.py configs/scenario.toml --out data/fingerprints.csv
"""

import argparse
from pathlib import Path

import numpy as np

from sentinel import dataset as ds
from sentinel.synthgen import load_scenario


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("scenario", type=Path)
    p.add_argument("--out", type=Path, required=True)
    args = p.parse_args()

    db = load_scenario(args.scenario).generate()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    ds.save_db(db, args.out)
    for b in db.buildings:
        sub = db.building(b)
        rss = np.array([fp.rss for fp in sub.fingerprints])
        heard = np.mean(rss > -100.0)
        print(f"{b}: {sub.n_classes} RPs, {len(sub)} fingerprints, {heard:.0%} of readings above the floor")
    print(f"wrote {len(db)} fingerprints x {db.ap_count} APs to {args.out}")


if __name__ == "__main__":
    main()
