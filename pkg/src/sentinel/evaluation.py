"""Localization error, attack sweeps and the full variant experiment.

One model is trained per (variant, building); the RP classes of a building
are its own. Errors are straight-line distances between predicted and true
RP coordinates, averaged uniformly over test samples.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from sentinel import dataset as ds
from sentinel.adversarial import AttackConfig, Method, attack_dataset, training_attack
from sentinel.capsnet import CapsNet, ModelConfig, load_checkpoint, save_checkpoint, train
from sentinel.synthgen import load_toml, scenario_from_dict

log = logging.getLogger(__name__)

PHI_GRID = tuple(range(0, 101, 10))
EPS_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
VARIANTS = ("NONE", "FGSM", "PGD", "MIM")


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


@dataclass
class Localizer:
    """A trained model for one building, with its class -> RP mapping."""

    building: str
    classes: tuple[str, ...]
    coords: np.ndarray  # (n_classes, 2)
    model: CapsNet

    @property
    def class_index(self) -> dict[str, int]:
        return {rp: i for i, rp in enumerate(self.classes)}

    def save(self, path) -> None:
        meta = {"building": self.building, "classes": list(self.classes), "coords": self.coords.tolist()}
        save_checkpoint(self.model, path, meta)

    @classmethod
    def load(cls, path) -> "Localizer":
        model, meta = load_checkpoint(path)
        return cls(meta["building"], tuple(meta["classes"]), np.asarray(meta["coords"], dtype=np.float64), model)


def localization_error(predicted: int, true: int, coords) -> float:
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    if not (0 <= predicted < n and 0 <= true < n):
        raise IndexError(f"RP index out of range for {n} RPs")
    return float(np.linalg.norm(coords[predicted] - coords[true]))


@dataclass(frozen=True)
class ErrorCell:
    device: str
    building: str
    mean: float
    best: float
    worst: float
    count: int


@dataclass
class ErrorReport:
    cells: list[ErrorCell]
    mean: float
    worst: float
    count: int
    fingerprint: str = ""
    weighting: str = "uniform over test samples"

    def cell(self, device: str, building: str) -> ErrorCell:
        for c in self.cells:
            if c.device == device and c.building == building:
                return c
        raise KeyError((device, building))

    def to_dict(self) -> dict:
        return asdict(self)


def _config_fingerprint(*parts) -> str:
    blob = json.dumps([p if not hasattr(p, "__dataclass_fields__") else asdict(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def sample_errors(
    localizers: Mapping[str, Localizer], test: Sequence[ds.Fingerprint], attack: AttackConfig | None = None
) -> np.ndarray:
    """Per-sample errors in meters, in the order of ``test``."""
    attack = attack or AttackConfig(Method.NONE, 0.0, 0.0)
    errors = np.zeros(len(test))
    by_building: dict[str, list[int]] = {}
    for k, fp in enumerate(test):
        by_building.setdefault(fp.building_id, []).append(k)
    for building, idx in sorted(by_building.items()):
        loc = localizers.get(building)
        if loc is None:
            raise KeyError(f"no model for building {building!r}")
        lookup = loc.class_index
        fps = [test[k] for k in idx]
        unknown = sorted({fp.rp_id for fp in fps if fp.rp_id not in lookup})
        if unknown:
            raise KeyError(f"RPs unknown to the {building} model: {', '.join(unknown[:5])}")
        labels = np.array([lookup[fp.rp_id] for fp in fps], dtype=np.int64)
        x = attack_dataset(loc.model, ds.images(fps), labels, attack)
        pred = loc.model.predict(x)
        errors[idx] = np.linalg.norm(loc.coords[pred] - loc.coords[labels], axis=1)
    return errors


def evaluate(
    localizers: Mapping[str, Localizer], test: Sequence[ds.Fingerprint], attack: AttackConfig | None = None
) -> ErrorReport:
    if not test:
        raise ValueError("empty test set")
    errors = sample_errors(localizers, test, attack)
    groups: dict[tuple[str, str], list[float]] = {}
    for fp, e in zip(test, errors):
        groups.setdefault((fp.device_id, fp.building_id), []).append(float(e))
    cells = [
        ErrorCell(dev, b, float(np.mean(v)), float(np.min(v)), float(np.max(v)), len(v))
        for (dev, b), v in sorted(groups.items())
    ]
    fp = _config_fingerprint(attack, *[(k, localizers[k].model.config.digest()) for k in sorted(localizers)])
    return ErrorReport(cells, float(errors.mean()), float(errors.max()), len(errors), fp)


@dataclass
class SweepTable:
    axis_name: str  # "phi" or "eps"
    axis: tuple[float, ...]
    method: str
    errors: dict[str, list[float]] = field(default_factory=dict)  # variant -> mean error per point

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.axis, self.axis[1:])):
            raise ValueError("sweep axis must be strictly increasing")

    def ratio(self, variant: str) -> float:
        """max/min of the variant's sweep curve (1.0 for a flat line)."""
        v = np.asarray(self.errors[variant])
        return float(v.max() / v.min()) if v.min() > 0 else float("inf") if v.max() > 0 else 1.0

    def rows(self) -> list[list]:
        out = []
        for variant in sorted(self.errors):
            for a, e in zip(self.axis, self.errors[variant]):
                out.append([self.method, variant, a, e])
        return out


def sweep_phi(
    localizers: Mapping[str, Localizer],
    test: Sequence[ds.Fingerprint],
    method: Method | str,
    eps: float = 0.1,
    grid: Iterable[float] = PHI_GRID,
    base: AttackConfig | None = None,
    variant: str = "model",
) -> SweepTable:
    base = base or AttackConfig()
    grid = tuple(grid)
    errs = [
        float(sample_errors(localizers, test, replace(base, method=Method(method), eps=eps, phi=phi)).mean())
        for phi in grid
    ]
    return SweepTable("phi", grid, Method(method).value, {variant: errs})


def sweep_eps(
    localizers: Mapping[str, Localizer],
    test: Sequence[ds.Fingerprint],
    method: Method | str,
    phi_range: Iterable[float] = PHI_GRID,
    grid: Iterable[float] = EPS_GRID,
    base: AttackConfig | None = None,
    variant: str = "model",
) -> SweepTable:
    """Mean error per eps, averaged over devices, buildings and the phi values."""
    base = base or AttackConfig()
    grid, phis = tuple(grid), tuple(phi_range)
    errs = []
    for eps in grid:
        per_phi = [
            sample_errors(localizers, test, replace(base, method=Method(method), eps=eps, phi=phi)).mean()
            for phi in phis
        ]
        errs.append(float(np.mean(per_phi)))
    return SweepTable("eps", grid, Method(method).value, {variant: errs})


# -------------------------------------------------------------- experiment


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict  # {"csv": path} or {"scenario": path} or an inline scenario table
    split: ds.SplitSpec
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    variants: tuple[str, ...] = VARIANTS
    attacks: tuple[str, ...] = ("FGSM", "PGD", "MIM")
    attack: AttackConfig = AttackConfig()
    train_attack: dict = field(default_factory=dict)  # iters / alpha for training attacks
    phi_grid: tuple[float, ...] = PHI_GRID
    eps_grid: tuple[float, ...] = EPS_GRID
    sweeps: bool = True
    seed: int = 0
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "ExperimentConfig":
        split = d.get("split", {})
        if "train_device" not in split:
            raise ValueError("[split] train_device is required")
        # data may be omitted when the caller supplies fingerprints directly
        data = d.get("data") or ({"inline": d["scenario"]} if "scenario" in d else {})
        a = d.get("attack", {})
        variants = tuple(v.upper() for v in d.get("variants", VARIANTS))
        bad = [v for v in variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}")
        return cls(
            data=data,
            split=ds.SplitSpec(
                str(split["train_device"]),
                int(split.get("train_samples_per_rp", 5)),
                int(split.get("test_samples_per_rp_per_device", 1)),
            ),
            model=dict(d.get("model", {})),
            variants=variants,
            attacks=tuple(m.upper() for m in d.get("attacks", ("FGSM", "PGD", "MIM"))),
            attack=AttackConfig(
                Method.FGSM,
                float(a.get("eps", 0.1)),
                float(a.get("phi", 100.0)),
                int(a.get("iters", 10)),
                float(a.get("alpha", 0.9)),
                int(a.get("mask_seed", 0)),
                bool(a.get("literal_momentum", False)),
            ),
            train_attack=dict(d.get("train_attack", {})),
            phi_grid=tuple(float(p) for p in d.get("phi_grid", PHI_GRID)),
            eps_grid=tuple(float(e) for e in d.get("eps_grid", EPS_GRID)),
            sweeps=bool(d.get("sweeps", True)),
            seed=int(d.get("seed", 0)),
            base_dir=base_dir,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_toml(path), base_dir=str(Path(path).resolve().parent))

    def load_db(self) -> ds.FingerprintDB:
        if "csv" in self.data:
            return ds.load_db(Path(self.base_dir) / self.data["csv"])
        if "scenario" in self.data:
            return scenario_from_dict(load_toml(Path(self.base_dir) / self.data["scenario"])).generate()
        if "inline" in self.data:
            return scenario_from_dict(self.data["inline"]).generate()
        raise ValueError("config needs a [data] section (csv or scenario) or an inline [scenario]")

    def digest(self) -> str:
        return _config_fingerprint({k: v for k, v in asdict(self).items() if k != "base_dir"})


def model_config_for(sub: ds.FingerprintDB, overrides: dict, seed: int) -> ModelConfig:
    params = {"init_seed": seed, **overrides}
    return ModelConfig(width=sub.ap_count, n_classes=sub.n_classes, **params)


def train_localizer(
    sub: ds.FingerprintDB,
    train_fps: Sequence[ds.Fingerprint],
    variant: str,
    overrides: dict,
    train_attack: dict,
    seed: int,
) -> Localizer:
    config = model_config_for(sub, overrides, seed)
    adv = None if variant == "NONE" else training_attack(variant, **train_attack)
    result = train(CapsNet(config), ds.images(train_fps), sub.labels(train_fps), adv=adv, seed=seed)
    building = train_fps[0].building_id
    classes = tuple(sorted(sub.rp_index, key=sub.rp_index.get))
    return Localizer(building, classes, sub.coords_array(), result.model)


def _train_job(args):
    sub, train_fps, variant, overrides, train_attack, seed = args
    return train_localizer(sub, train_fps, variant, overrides, train_attack, seed)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1, reuse_checkpoints: bool = True) -> dict:
    """Train the variants, evaluate clean / attacked / swept, write reports.

    Files written under ``out_dir``: heatmap.csv, device_summary.csv,
    attacks.csv, sweep_phi.csv, sweep_eps.csv, summary.json, test.csv and
    checkpoints/<variant>_<building>.ckpt. Returns the summary dict.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    try:
        db = cfg.load_db()
    except (OSError, ValueError) as e:
        raise ExperimentError("data", str(e)) from e
    try:
        train_fps, test_fps = ds.split(db, cfg.split, cfg.seed)
    except ValueError as e:
        raise ExperimentError("split", str(e)) from e
    ds.save_db(test_fps, out / "test.csv", ap_count=db.ap_count)

    buildings = db.buildings
    subs = {b: db.building(b) for b in buildings}
    train_by_b = {b: [fp for fp in train_fps if fp.building_id == b] for b in buildings}

    # ---- train (or reuse checkpoints)
    localizers: dict[str, dict[str, Localizer]] = {v: {} for v in cfg.variants}
    todo = []
    for v in cfg.variants:
        for k, b in enumerate(buildings):
            ckpt = out / "checkpoints" / f"{v}_{b}.ckpt"
            seed = cfg.seed * 1000 + k
            expected = model_config_for(subs[b], cfg.model, seed)
            if reuse_checkpoints and ckpt.exists():
                try:
                    loc = Localizer.load(ckpt)
                    if loc.model.config == expected:
                        localizers[v][b] = loc
                        continue
                except ValueError:
                    pass
            todo.append((v, b, ckpt, (subs[b], train_by_b[b], v, cfg.model, cfg.train_attack, seed)))
    try:
        if jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                trained = list(pool.map(_train_job, [t[3] for t in todo]))
        else:
            trained = []
            for v, b, _, args in todo:
                log.info("training %s on %s", v, b)
                trained.append(_train_job(args))
    except (ArithmeticError, RuntimeError) as e:
        raise ExperimentError("train", str(e)) from e
    for (v, b, ckpt, _), loc in zip(todo, trained):
        loc.save(ckpt)
        localizers[v][b] = loc

    # ---- evaluate
    try:
        clean = {v: evaluate(localizers[v], test_fps) for v in cfg.variants}
        attacked: dict[str, dict[str, ErrorReport]] = {}
        for m in cfg.attacks:
            acfg = replace(cfg.attack, method=Method(m))
            attacked[m] = {v: evaluate(localizers[v], test_fps, acfg) for v in cfg.variants}
        phi_tables: list[SweepTable] = []
        eps_tables: list[SweepTable] = []
        if cfg.sweeps:
            for m in cfg.attacks:
                pt = SweepTable("phi", cfg.phi_grid, m)
                et = SweepTable("eps", cfg.eps_grid, m)
                for v in cfg.variants:
                    log.info("sweeping %s attack on %s", m, v)
                    pt.errors.update(
                        sweep_phi(localizers[v], test_fps, m, cfg.attack.eps, cfg.phi_grid, cfg.attack, v).errors
                    )
                    et.errors.update(
                        sweep_eps(localizers[v], test_fps, m, cfg.phi_grid, cfg.eps_grid, cfg.attack, v).errors
                    )
                phi_tables.append(pt)
                eps_tables.append(et)
    except (ArithmeticError, RuntimeError, KeyError, ValueError) as e:
        raise ExperimentError("eval", str(e)) from e

    # ---- reports
    _write_csv(
        out / "heatmap.csv",
        ["variant", "device", "building", "mean_m", "best_m", "worst_m", "count"],
        ([v, c.device, c.building, c.mean, c.best, c.worst, c.count] for v in cfg.variants for c in clean[v].cells),
    )
    device_rows = []
    for v in cfg.variants:
        for dev in db.devices:
            means = [c.mean for c in clean[v].cells if c.device == dev]
            if means:
                device_rows.append([v, dev, float(np.mean(means)), float(np.min(means)), float(np.max(means))])
    _write_csv(out / "device_summary.csv", ["variant", "device", "mean_m", "best_m", "worst_m"], device_rows)
    _write_csv(
        out / "attacks.csv",
        ["attack", "variant", "device", "building", "mean_m", "best_m", "worst_m", "count"],
        (
            [m, v, c.device, c.building, c.mean, c.best, c.worst, c.count]
            for m in cfg.attacks
            for v in cfg.variants
            for c in attacked[m][v].cells
        ),
    )
    if cfg.sweeps:
        _write_csv(out / "sweep_phi.csv", ["attack", "variant", "phi", "mean_m"], (r for t in phi_tables for r in t.rows()))
        _write_csv(out / "sweep_eps.csv", ["attack", "variant", "eps", "mean_m"], (r for t in eps_tables for r in t.rows()))

    ratios: dict[str, dict[str, float]] = {}
    if "NONE" in cfg.variants:
        for m in cfg.attacks:
            base = attacked[m]["NONE"].mean
            ratios[m] = {v: (base / attacked[m][v].mean if attacked[m][v].mean > 0 else float("inf")) for v in cfg.variants}
    summary = {
        "config_fingerprint": cfg.digest(),
        "variants": list(cfg.variants),
        "attacks": list(cfg.attacks),
        "attack_eps": cfg.attack.eps,
        "attack_phi": cfg.attack.phi,
        "buildings": buildings,
        "devices": db.devices,
        "n_train": len(train_fps),
        "n_test": len(test_fps),
        "weighting": "uniform over test samples",
        "clean_mean_m": {v: clean[v].mean for v in cfg.variants},
        "clean_worst_m": {v: clean[v].worst for v in cfg.variants},
        "attacked_mean_m": {m: {v: attacked[m][v].mean for v in cfg.variants} for m in cfg.attacks},
        # mean error of the NONE variant divided by the variant's, per attack
        "ratio_none_over_variant": ratios,
    }
    if cfg.sweeps:
        summary["phi_sweep_max_over_min"] = {t.method: {v: t.ratio(v) for v in t.errors} for t in phi_tables}
        summary["phi_sweep_mean_m"] = {t.method: {"axis": list(t.axis), **t.errors} for t in phi_tables}
        summary["eps_sweep_mean_m"] = {t.method: {"axis": list(t.axis), **t.errors} for t in eps_tables}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def load_localizers(model_dir, variant: str) -> dict[str, Localizer]:
    """All ``<variant>_<building>.ckpt`` files in a directory, keyed by building."""
    model_dir = Path(model_dir)
    prefix = f"{variant.upper()}_"
    found = {}
    for name in sorted(os.listdir(model_dir)):
        if name.startswith(prefix) and name.endswith(".ckpt"):
            loc = Localizer.load(model_dir / name)
            found[loc.building] = loc
    if not found:
        raise FileNotFoundError(f"no {prefix}*.ckpt checkpoints in {model_dir}")
    return found
