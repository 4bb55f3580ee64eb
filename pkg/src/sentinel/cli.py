"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from sentinel import dataset as ds
from sentinel import numerics as nx
from sentinel.adversarial import AttackConfig, AttackError, Method, attack_dataset
from sentinel.capsnet import CheckpointError, ConfigError, TrainingError
from sentinel.evaluation import (
    EPS_GRID,
    PHI_GRID,
    ExperimentConfig,
    ExperimentError,
    evaluate,
    load_localizers,
    run_experiment,
    sweep_eps,
    sweep_phi,
    train_localizer,
)
from sentinel.synthgen import ScenarioError, load_scenario

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("sentinel")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _attack_args(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    p.add_argument("--method", default="FGSM", type=str.upper, choices=[m.value for m in Method])
    if not sweep:
        p.add_argument("--eps", type=float, default=0.1)
        p.add_argument("--phi", type=float, default=100.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--literal-momentum", action="store_true", help="MIM momentum on the absolute iterate")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--deterministic", action="store_true", help="single-threaded, byte-identical output")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sentinel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset from a scenario file")
    _common(p)

    p = sub.add_parser("train", help="train one variant per building and save checkpoints")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="canonical CSV with all fingerprints")
    p.add_argument("--variant", default="NONE", type=str.upper, choices=["NONE", "FGSM", "PGD", "MIM"])
    p.add_argument("--train-device", help="overrides [split] train_device")
    p.add_argument("--epochs", type=int, help="overrides [model] epochs")

    for name, text in (("attack", "write attacked fingerprints as canonical CSV"), ("eval", "error report for a test CSV")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--models", type=Path, required=True, help="directory of checkpoints")
        p.add_argument("--variant", default="NONE", type=str.upper)
        p.add_argument("--data", type=Path, required=True, help="test fingerprints (canonical CSV)")
        p.add_argument("--mask-seed", type=int, default=None)
        _attack_args(p)

    p = sub.add_parser("sweep", help="phi or eps sweep for one variant")
    p.add_argument("axis", choices=["phi", "eps"])
    _common(p)
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("--variant", default="NONE", type=str.upper)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--eps", type=float, default=0.1, help="fixed eps for the phi sweep")
    p.add_argument("--mask-seed", type=int, default=None)
    _attack_args(p, sweep=True)

    p = sub.add_parser("experiment", help="full pipeline from one config file")
    _common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    p.add_argument("--retrain", action="store_true", help="ignore existing checkpoints")
    return parser


def _attack_from(args, seed: int) -> AttackConfig:
    mask_seed = args.mask_seed if args.mask_seed is not None else seed
    return AttackConfig(
        Method(args.method),
        getattr(args, "eps", 0.1),
        getattr(args, "phi", 100.0),
        args.iters,
        args.alpha,
        mask_seed,
        args.literal_momentum,
    )


def _experiment_config(args) -> ExperimentConfig | None:
    if args.config is None:
        return None
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_gen(args) -> None:
    if args.config is None:
        raise UsageError("gen needs --config <scenario.toml>")
    scenario = load_scenario(args.config)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    db = scenario.generate()
    out = args.out if args.out.suffix == ".csv" else args.out / "fingerprints.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save_db(db, out)
    print(f"wrote {len(db)} fingerprints ({db.ap_count} APs, {db.n_classes} RPs) to {out}")


def cmd_train(args) -> None:
    db = ds.load_db(args.data)
    cfg = _experiment_config(args)
    overrides = dict(cfg.model) if cfg else {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    train_attack = dict(cfg.train_attack) if cfg else {}
    if cfg:
        spec = cfg.split if args.train_device is None else replace(cfg.split, train_device=args.train_device)
    elif args.train_device:
        spec = ds.SplitSpec(args.train_device)
    else:
        raise UsageError("train needs --train-device or a --config with [split]")
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    train_fps, test_fps = ds.split(db, spec, seed)
    args.out.mkdir(parents=True, exist_ok=True)
    ds.save_db(test_fps, args.out / "test.csv", ap_count=db.ap_count)
    for k, b in enumerate(db.buildings):
        fps = [fp for fp in train_fps if fp.building_id == b]
        loc = train_localizer(db.building(b), fps, args.variant, overrides, train_attack, seed * 1000 + k)
        path = args.out / f"{args.variant}_{b}.ckpt"
        loc.save(path)
        print(f"{b}: saved {path}")


def cmd_attack(args) -> None:
    locs = load_localizers(args.models, args.variant)
    db = ds.load_db(args.data)
    acfg = _attack_from(args, args.seed or 0)
    out_fps = []
    for b in db.buildings:
        loc = locs[b]
        fps = [fp for fp in db.fingerprints if fp.building_id == b]
        lookup = loc.class_index
        labels = [lookup[fp.rp_id] for fp in fps]
        out_fps.extend(ds.with_images(fps, attack_dataset(loc.model, ds.images(fps), labels, acfg)))
    out = args.out if args.out.suffix == ".csv" else args.out / "attacked.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save_db(out_fps, out, ap_count=db.ap_count)
    print(f"wrote {len(out_fps)} attacked fingerprints to {out}")


def cmd_eval(args) -> None:
    locs = load_localizers(args.models, args.variant)
    db = ds.load_db(args.data)
    report = evaluate(locs, db.fingerprints, _attack_from(args, args.seed or 0))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"mean error {report.mean:.3f} m, worst {report.worst:.3f} m over {report.count} samples")


def cmd_sweep(args) -> None:
    locs = load_localizers(args.models, args.variant)
    db = ds.load_db(args.data)
    base = _attack_from(args, args.seed or 0)
    if args.axis == "phi":
        table = sweep_phi(locs, db.fingerprints, args.method, args.eps, PHI_GRID, base, args.variant)
    else:
        table = sweep_eps(locs, db.fingerprints, args.method, PHI_GRID, EPS_GRID, base, args.variant)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"sweep_{args.axis}.csv"
    lines = [f"attack,variant,{args.axis},mean_m"] + [f"{m},{v},{a!r},{e!r}" for m, v, a, e in table.rows()]
    path.write_text("\n".join(lines) + "\n")
    for a, e in zip(table.axis, table.errors[args.variant]):
        print(f"{args.axis}={a:g}: {e:.3f} m")


def cmd_experiment(args) -> None:
    cfg = _experiment_config(args)
    if cfg is None:
        raise UsageError("experiment needs --config")
    jobs = 1 if args.deterministic else max(1, args.jobs)
    summary = run_experiment(cfg, args.out, jobs=jobs, reuse_checkpoints=not args.retrain)
    for v, e in summary["clean_mean_m"].items():
        print(f"{v}: clean mean error {e:.3f} m")
    for m, row in summary["attacked_mean_m"].items():
        print(f"under {m}: " + ", ".join(f"{v} {e:.3f} m" for v, e in row.items()))


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.cmd](args)
    except UsageError as e:
        print(f"sentinel: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ExperimentError as e:
        print(f"sentinel: {e}", file=sys.stderr)
        numeric = isinstance(e.__cause__, (ArithmeticError, TrainingError, AttackError))
        return EXIT_NUMERIC if numeric else EXIT_DATA
    except (ArithmeticError, TrainingError, AttackError, nx.NumericError) as e:
        print(f"sentinel: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError, ValueError, ds.DataError, ScenarioError, CheckpointError, ConfigError) as e:
        print(f"sentinel: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
