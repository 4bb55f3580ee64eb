"""Seeded synthetic indoor environments, device profiles and evil-twin rogues.

RSS follows a clamped log-distance model::

    rss = clamp(P0 - 10 * n * log10(max(d, 1 m)) + offset + N(0, sigma^2), -100, 0)

An evil twin silences its victim AP and broadcasts in its place, so the
victim's column is replaced by the rogue's own path-loss value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from sentinel.dataset import RSS_CEIL, RSS_FLOOR, Fingerprint, FingerprintDB

CORRIDOR_MARGIN_M = 5.0
TX_POWER_RANGE = (-45.0, -35.0)
EXPONENT_RANGE = (2.0, 4.0)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Environment:
    path_length: float
    rp_spacing: float
    ap_positions: np.ndarray  # (num_aps, 2)
    tx_power_dbm: np.ndarray  # (num_aps,)
    path_loss_exponent: float

    def __post_init__(self):
        if self.rp_spacing <= 0:
            raise ScenarioError("rp_spacing must be positive")
        if len(self.ap_positions) < 1:
            raise ScenarioError("environment needs at least one AP")
        if len(self.tx_power_dbm) != len(self.ap_positions):
            raise ScenarioError("one tx power per AP")
        if not 1.5 <= self.path_loss_exponent <= 6.0:
            raise ScenarioError("path_loss_exponent must be in [1.5, 6]")

    @property
    def num_aps(self) -> int:
        return len(self.ap_positions)

    @property
    def rp_positions(self) -> np.ndarray:
        n = int(math.floor(self.path_length / self.rp_spacing + 1e-9)) + 1
        xs = np.arange(n) * self.rp_spacing
        return np.stack([xs, np.zeros(n)], axis=1)

    @property
    def num_rps(self) -> int:
        return len(self.rp_positions)


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    rss_offset_dbm: float = 0.0
    noise_sigma_dbm: float = 0.0

    def __post_init__(self):
        if self.noise_sigma_dbm < 0:
            raise ScenarioError("noise_sigma_dbm must be >= 0")


@dataclass(frozen=True)
class RogueConfig:
    target_aps: tuple[int, ...] = ()
    rogue_positions: tuple[tuple[float, float], ...] = ()
    rogue_tx_power_dbm: tuple[float, ...] = ()

    def __post_init__(self):
        if len(set(self.target_aps)) != len(self.target_aps):
            raise ScenarioError("rogue target APs must be distinct")
        if not len(self.target_aps) == len(self.rogue_positions) == len(self.rogue_tx_power_dbm):
            raise ScenarioError("each rogue needs a target, a position and a tx power")

    @property
    def rogue_count(self) -> int:
        return len(self.target_aps)

    def first(self, k: int) -> "RogueConfig":
        """The first ``k`` rogues, for incremental Rogue0..RogueK scenarios."""
        return RogueConfig(self.target_aps[:k], self.rogue_positions[:k], self.rogue_tx_power_dbm[:k])


def log_distance_rss(tx_power_dbm, exponent: float, distance_m) -> np.ndarray:
    d = np.maximum(np.asarray(distance_m, dtype=np.float64), 1.0)
    return np.asarray(tx_power_dbm, dtype=np.float64) - 10.0 * exponent * np.log10(d)


def generate_environment(num_aps: int, path_length: float, rp_spacing: float, seed: int) -> Environment:
    if num_aps < 1:
        raise ScenarioError("num_aps must be >= 1")
    if path_length <= 0:
        raise ScenarioError("path_length must be positive")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-CORRIDOR_MARGIN_M, path_length + CORRIDOR_MARGIN_M, num_aps)
    ys = rng.uniform(-CORRIDOR_MARGIN_M, CORRIDOR_MARGIN_M, num_aps)
    tx = rng.uniform(*TX_POWER_RANGE, num_aps)
    exponent = float(rng.uniform(*EXPONENT_RANGE))
    return Environment(path_length, rp_spacing, np.stack([xs, ys], axis=1), tx, exponent)


def clean_rss(env: Environment, rp: int, offset_dbm: float = 0.0) -> np.ndarray:
    """Noise-free RSS at an RP, before clamping."""
    if not 0 <= rp < env.num_rps:
        raise IndexError(f"rp {rp} out of range for {env.num_rps} RPs")
    d = np.linalg.norm(env.ap_positions - env.rp_positions[rp], axis=1)
    return log_distance_rss(env.tx_power_dbm, env.path_loss_exponent, d) + offset_dbm


def sample_rss(env: Environment, rp: int, profile: DeviceProfile, rng: np.random.Generator) -> np.ndarray:
    raw = clean_rss(env, rp, profile.rss_offset_dbm)
    if profile.noise_sigma_dbm > 0:
        raw = raw + rng.normal(0.0, profile.noise_sigma_dbm, raw.shape)
    return np.clip(raw, RSS_FLOOR, RSS_CEIL)


def rp_id(building_id: str, rp: int) -> str:
    return f"{building_id}-RP{rp:03d}"


def sample_fingerprint(
    env: Environment,
    rp: int,
    profile: DeviceProfile,
    seed: int,
    building_id: str = "B0",
    sample_idx: int = 0,
) -> Fingerprint:
    rss = sample_rss(env, rp, profile, np.random.default_rng(seed))
    xy = tuple(float(c) for c in env.rp_positions[rp])
    return Fingerprint(building_id, rp_id(building_id, rp), xy, profile.device_id, sample_idx, tuple(map(float, rss)))


def apply_evil_twin(
    fp: Fingerprint, env: Environment, rogues: RogueConfig, rp: int, offset_dbm: float = 0.0
) -> Fingerprint:
    """Replace each victim AP's reading by what its rogue twin delivers at ``rp``.

    ``offset_dbm`` is the receiving device's bias, applied to the rogue
    signal just as it is to legitimate ones.
    """
    if rogues.rogue_count == 0:
        return fp
    width = len(fp.rss)
    bad = [j for j in rogues.target_aps if not 0 <= j < width]
    if bad:
        raise ScenarioError(f"rogue target AP {bad[0]} out of range for {width} APs")
    rss = list(fp.rss)
    here = env.rp_positions[rp]
    for j, pos, tx in zip(rogues.target_aps, rogues.rogue_positions, rogues.rogue_tx_power_dbm):
        d = float(np.linalg.norm(np.asarray(pos, dtype=np.float64) - here))
        value = float(log_distance_rss(tx, env.path_loss_exponent, d)) + offset_dbm
        rss[j] = min(max(value, RSS_FLOOR), RSS_CEIL)
    return Fingerprint(fp.building_id, fp.rp_id, fp.rp_xy, fp.device_id, fp.sample_idx, tuple(rss))


def building_fingerprints(
    env: Environment,
    devices: Sequence[DeviceProfile],
    samples_per_rp_per_device: int,
    rogues: RogueConfig,
    seed: int,
    building_id: str = "B0",
    width: int | None = None,
) -> list[Fingerprint]:
    """All (rp, device, sample) fingerprints of one building, sorted by that key.

    Clean readings are drawn before any rogue is applied, so the same seed
    gives identical clean data under every rogue configuration. ``width``
    pads the AP axis with -100 (unheard) columns.
    """
    width = env.num_aps if width is None else width
    if width < env.num_aps:
        raise ScenarioError("width smaller than the number of APs")
    rng = np.random.default_rng(seed)
    pad = (RSS_FLOOR,) * (width - env.num_aps)
    out = []
    for rp in range(env.num_rps):
        xy = tuple(float(c) for c in env.rp_positions[rp])
        for dev in sorted(devices, key=lambda d: d.device_id):
            for s in range(samples_per_rp_per_device):
                rss = tuple(map(float, sample_rss(env, rp, dev, rng))) + pad
                fp = Fingerprint(building_id, rp_id(building_id, rp), xy, dev.device_id, s, rss)
                out.append(apply_evil_twin(fp, env, rogues, rp, dev.rss_offset_dbm))
    return out


def generate_dataset(
    env: Environment,
    devices: Sequence[DeviceProfile],
    samples_per_rp_per_device: int,
    rogues: RogueConfig,
    seed: int,
    building_id: str = "B0",
) -> FingerprintDB:
    return FingerprintDB.from_fingerprints(
        building_fingerprints(env, devices, samples_per_rp_per_device, rogues, seed, building_id)
    )


# -------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class BuildingSpec:
    building_id: str
    num_aps: int
    path_length: float
    rp_spacing: float = 1.0
    seed: int = 0
    rogues: RogueConfig = field(default_factory=RogueConfig)


@dataclass(frozen=True)
class Scenario:
    buildings: tuple[BuildingSpec, ...]
    devices: tuple[DeviceProfile, ...]
    samples_per_rp_per_device: int = 6
    seed: int = 0

    def environments(self) -> dict[str, Environment]:
        return {
            b.building_id: generate_environment(b.num_aps, b.path_length, b.rp_spacing, b.seed)
            for b in self.buildings
        }

    def generate(self) -> FingerprintDB:
        width = max(b.num_aps for b in self.buildings)
        envs = self.environments()
        fps: list[Fingerprint] = []
        for k, b in enumerate(self.buildings):
            fps.extend(
                building_fingerprints(
                    envs[b.building_id],
                    self.devices,
                    self.samples_per_rp_per_device,
                    b.rogues,
                    seed=self.seed * 1_000_003 + k,
                    building_id=b.building_id,
                    width=width,
                )
            )
        return FingerprintDB.from_fingerprints(fps)


def _rogues_from_dict(d: dict | None) -> RogueConfig:
    if not d:
        return RogueConfig()
    return RogueConfig(
        tuple(int(t) for t in d.get("targets", ())),
        tuple((float(p[0]), float(p[1])) for p in d.get("positions", ())),
        tuple(float(t) for t in d.get("tx_power_dbm", ())),
    )


def scenario_from_dict(d: dict) -> Scenario:
    """Build a Scenario from parsed TOML (see README for the schema)."""
    try:
        buildings = tuple(
            BuildingSpec(
                str(b["id"]),
                int(b["num_aps"]),
                float(b["path_length"]),
                float(b.get("rp_spacing", 1.0)),
                int(b.get("seed", k)),
                _rogues_from_dict(b.get("rogue")),
            )
            for k, b in enumerate(d["building"])
        )
        devices = tuple(
            DeviceProfile(str(v["id"]), float(v.get("offset_dbm", 0.0)), float(v.get("noise_dbm", 0.0)))
            for v in d["device"]
        )
    except KeyError as e:
        raise ScenarioError(f"scenario is missing required key {e}") from None
    if not buildings or not devices:
        raise ScenarioError("scenario needs at least one building and one device")
    return Scenario(buildings, devices, int(d.get("samples_per_rp", 6)), int(d.get("seed", 0)))


def load_toml(path: str | Path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_dict(load_toml(path))
