"""Fingerprint database: canonical CSV I/O, train/test split, image mapping.

Canonical CSV header::

    building_id,rp_id,x_m,y_m,device_id,sample_idx,ap_0,...,ap_{W-1}

RSS values are dBm in [-100, 0]; an AP that is not heard is written as -100.
Lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RSS_FLOOR = -100.0
RSS_CEIL = 0.0
META_COLUMNS = ("building_id", "rp_id", "x_m", "y_m", "device_id", "sample_idx")


class DataError(ValueError):
    """Base class for problems with fingerprint data."""


class ParseError(DataError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class SchemaError(DataError):
    pass


class RangeError(DataError):
    pass


class CoverageError(DataError):
    pass


@dataclass(frozen=True)
class Fingerprint:
    building_id: str
    rp_id: str
    rp_xy: tuple[float, float]
    device_id: str
    sample_idx: int
    rss: tuple[float, ...]

    def __post_init__(self):
        for v in self.rss:
            if not RSS_FLOOR <= v <= RSS_CEIL:
                raise RangeError(f"rss value {v} outside [-100, 0] at rp {self.rp_id}")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.rp_id, self.device_id, self.sample_idx)


@dataclass(frozen=True)
class FingerprintDB:
    fingerprints: tuple[Fingerprint, ...]
    ap_count: int
    rp_index: dict[str, int] = field(compare=False)
    rp_coords: dict[str, tuple[float, float]] = field(compare=False)

    @classmethod
    def from_fingerprints(cls, fps: Iterable[Fingerprint]) -> "FingerprintDB":
        fps = tuple(fps)
        widths = {len(fp.rss) for fp in fps}
        if len(widths) > 1:
            raise SchemaError(f"fingerprints have differing AP counts {sorted(widths)}")
        coords: dict[str, tuple[float, float]] = {}
        for fp in fps:
            prev = coords.setdefault(fp.rp_id, fp.rp_xy)
            if prev != fp.rp_xy:
                raise SchemaError(f"rp {fp.rp_id} has conflicting coordinates {prev} and {fp.rp_xy}")
        rp_index = {rp: i for i, rp in enumerate(sorted(coords))}
        return cls(fps, widths.pop() if widths else 0, rp_index, coords)

    def __len__(self) -> int:
        return len(self.fingerprints)

    @property
    def n_classes(self) -> int:
        return len(self.rp_index)

    @property
    def buildings(self) -> list[str]:
        return sorted({fp.building_id for fp in self.fingerprints})

    @property
    def devices(self) -> list[str]:
        return sorted({fp.device_id for fp in self.fingerprints})

    def building(self, building_id: str) -> "FingerprintDB":
        """Sub-database for one building, with its own dense class indices."""
        return FingerprintDB.from_fingerprints(fp for fp in self.fingerprints if fp.building_id == building_id)

    def labels(self, fps: Sequence[Fingerprint] | None = None) -> np.ndarray:
        fps = self.fingerprints if fps is None else fps
        return np.array([self.rp_index[fp.rp_id] for fp in fps], dtype=np.int64)

    def coords_array(self) -> np.ndarray:
        """(n_classes, 2) RP coordinates in class-index order."""
        return np.array([self.rp_coords[rp] for rp in sorted(self.rp_index, key=self.rp_index.get)], dtype=np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FingerprintDB):
            return NotImplemented
        return (
            self.fingerprints == other.fingerprints
            and self.ap_count == other.ap_count
            and self.rp_index == other.rp_index
            and self.rp_coords == other.rp_coords
        )


# ---------------------------------------------------------------- CSV I/O


def _parse_float(text: str, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(line, f"column {column}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(line, f"column {column}: non-finite value {text!r}")
    return value


def parse_db(text: str) -> FingerprintDB:
    header = None
    fps = []
    reader = csv.reader(io.StringIO(text))
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if row[0].lstrip().startswith("#"):
            continue
        row = [c.strip() for c in row]
        if header is None:
            header = row
            if tuple(header[: len(META_COLUMNS)]) != META_COLUMNS:
                raise SchemaError(f"header must start with {','.join(META_COLUMNS)}")
            aps = header[len(META_COLUMNS) :]
            if not aps or aps != [f"ap_{j}" for j in range(len(aps))]:
                raise SchemaError("AP columns must be ap_0..ap_{W-1}")
            continue
        if len(row) != len(header):
            raise SchemaError(f"line {line}: expected {len(header)} columns, found {len(row)}")
        building, rp, xs, ys, device, idx = row[: len(META_COLUMNS)]
        try:
            sample_idx = int(idx)
        except ValueError:
            raise ParseError(line, f"sample_idx is not an integer: {idx!r}") from None
        xy = (_parse_float(xs, line, "x_m"), _parse_float(ys, line, "y_m"))
        rss = tuple(_parse_float(v, line, header[len(META_COLUMNS) + j]) for j, v in enumerate(row[len(META_COLUMNS) :]))
        bad = [v for v in rss if not RSS_FLOOR <= v <= RSS_CEIL]
        if bad:
            raise RangeError(f"line {line}: rss value {bad[0]} outside [-100, 0]")
        fps.append(Fingerprint(building, rp, xy, device, sample_idx, rss))
    if header is None:
        raise SchemaError("missing header")
    db = FingerprintDB.from_fingerprints(fps)
    keys = [(fp.building_id, *fp.key) for fp in fps]
    if len(set(keys)) != len(keys):
        raise SchemaError("duplicate (building, rp, device, sample_idx) rows")
    if fps and db.ap_count != len(header) - len(META_COLUMNS):
        raise SchemaError("AP count mismatch")
    return db


def load_db(path: str | Path) -> FingerprintDB:
    return parse_db(Path(path).read_text(encoding="utf-8"))


def format_db(db: FingerprintDB | Iterable[Fingerprint], ap_count: int | None = None) -> str:
    fps = db.fingerprints if isinstance(db, FingerprintDB) else tuple(db)
    width = db.ap_count if isinstance(db, FingerprintDB) else (ap_count if ap_count is not None else len(fps[0].rss))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*META_COLUMNS, *(f"ap_{j}" for j in range(width))])
    for fp in fps:
        w.writerow([fp.building_id, fp.rp_id, repr(fp.rp_xy[0]), repr(fp.rp_xy[1]), fp.device_id, fp.sample_idx, *map(repr, fp.rss)])
    return buf.getvalue()


def save_db(db: FingerprintDB | Iterable[Fingerprint], path: str | Path, ap_count: int | None = None) -> None:
    Path(path).write_text(format_db(db, ap_count), encoding="utf-8")


# ------------------------------------------------------------------ split


@dataclass(frozen=True)
class SplitSpec:
    train_device: str
    train_samples_per_rp: int = 5
    test_samples_per_rp_per_device: int = 1

    def __post_init__(self):
        if self.train_samples_per_rp < 1:
            raise ValueError("train_samples_per_rp must be >= 1")
        if self.test_samples_per_rp_per_device < 0:
            raise ValueError("test_samples_per_rp_per_device must be >= 0")


def split(db: FingerprintDB, spec: SplitSpec, seed: int) -> tuple[list[Fingerprint], list[Fingerprint]]:
    """Train on one device (k per RP), test on held-out samples of every device.

    Samples of each (rp, device) group are ordered by sample index, shuffled
    with the seeded generator, and taken in order.
    """
    groups: dict[tuple[str, str], list[Fingerprint]] = defaultdict(list)
    for fp in db.fingerprints:
        groups[(fp.rp_id, fp.device_id)].append(fp)
    rng = np.random.default_rng(seed)
    rps = sorted(db.rp_index, key=db.rp_index.get)
    short = [rp for rp in rps if len(groups.get((rp, spec.train_device), ())) < spec.train_samples_per_rp]
    if short:
        raise CoverageError(
            f"device {spec.train_device!r} has fewer than {spec.train_samples_per_rp} samples at RPs: {', '.join(short)}"
        )
    train, test = [], []
    for rp in rps:
        for device in db.devices:
            members = sorted(groups.get((rp, device), ()), key=lambda f: f.sample_idx)
            if not members:
                continue
            order = [members[i] for i in rng.permutation(len(members))]
            if device == spec.train_device:
                train.extend(order[: spec.train_samples_per_rp])
                order = order[spec.train_samples_per_rp :]
            need = spec.test_samples_per_rp_per_device
            if len(order) < need:
                raise CoverageError(f"rp {rp}, device {device}: {len(order)} samples left for testing, need {need}")
            test.extend(order[:need])
    return train, test


# ----------------------------------------------------------------- images


def rss_to_image(fp: Fingerprint | Sequence[float]) -> np.ndarray:
    """(1, W, 1) grayscale image, pixel = (rss + 100) / 100."""
    rss = np.asarray(fp.rss if isinstance(fp, Fingerprint) else fp, dtype=np.float64)
    if np.any(rss < RSS_FLOOR) or np.any(rss > RSS_CEIL):
        raise RangeError("rss outside [-100, 0]")
    return ((rss - RSS_FLOOR) / (RSS_CEIL - RSS_FLOOR)).reshape(1, -1, 1)


def image_to_rss(img) -> np.ndarray:
    px = np.asarray(img, dtype=np.float64).reshape(-1)
    if np.any(px < 0.0) or np.any(px > 1.0):
        raise RangeError("pixel outside [0, 1]")
    return px * (RSS_CEIL - RSS_FLOOR) + RSS_FLOOR


def images(fps: Sequence[Fingerprint]) -> np.ndarray:
    """Stack fingerprints into an (N, W) array of pixel rows."""
    if not fps:
        return np.zeros((0, 0))
    rss = np.array([fp.rss for fp in fps], dtype=np.float64)
    return (rss - RSS_FLOOR) / (RSS_CEIL - RSS_FLOOR)


def with_images(fps: Sequence[Fingerprint], pixels: np.ndarray) -> list[Fingerprint]:
    """Copies of ``fps`` whose RSS comes from (N, W) pixel rows."""
    rss = np.clip(image_to_rss(pixels).reshape(len(fps), -1), RSS_FLOOR, RSS_CEIL)
    return [
        Fingerprint(fp.building_id, fp.rp_id, fp.rp_xy, fp.device_id, fp.sample_idx, tuple(float(v) for v in row))
        for fp, row in zip(fps, rss)
    ]
