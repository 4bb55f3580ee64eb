import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sentinel import synthgen as sg
from sentinel.dataset import Fingerprint


def _env(ap_positions, tx, exponent=2.0, length=10.0):
    return sg.Environment(length, 1.0, np.asarray(ap_positions, float), np.asarray(tx, float), exponent)


def test_rp_grid_includes_both_ends():
    env = sg.generate_environment(3, 55.0, 1.0, seed=0)
    assert env.num_rps == 56
    np.testing.assert_array_equal(env.rp_positions[:, 0], np.arange(56.0))
    assert sg.generate_environment(3, 54.0, 1.0, seed=0).num_rps == 55


def test_environment_is_seeded():
    a, b = sg.generate_environment(8, 20, 1, 5), sg.generate_environment(8, 20, 1, 5)
    np.testing.assert_array_equal(a.ap_positions, b.ap_positions)
    np.testing.assert_array_equal(a.tx_power_dbm, b.tx_power_dbm)
    assert a.path_loss_exponent == b.path_loss_exponent
    assert np.all((a.tx_power_dbm >= -45) & (a.tx_power_dbm <= -35))
    assert 2.0 <= a.path_loss_exponent <= 4.0


def test_zero_aps_rejected():
    with pytest.raises(sg.ScenarioError):
        sg.generate_environment(0, 10, 1, 0)


def test_log_distance_at_ten_metres():
    # -40 - 10 * 2 * log10(10) = -60
    env = _env([[0.0, 10.0]], [-40.0])
    fp = sg.sample_fingerprint(env, 0, sg.DeviceProfile("D"), seed=0)
    assert fp.rss[0] == pytest.approx(-60.0, abs=1e-12)


def test_clamped_to_floor():
    env = _env([[0.0, 5000.0]], [-40.0], exponent=4.0)
    assert sg.sample_fingerprint(env, 0, sg.DeviceProfile("D"), seed=0).rss[0] == -100.0


def test_noise_free_is_deterministic():
    env = sg.generate_environment(6, 10, 1, 1)
    p = sg.DeviceProfile("D", 2.0, 0.0)
    assert sg.sample_fingerprint(env, 3, p, 1) == sg.sample_fingerprint(env, 3, p, 99)


def test_monotone_attenuation():
    env = _env([[0.0, 0.0]], [-30.0], exponent=3.0, length=40.0)
    rss = [sg.sample_fingerprint(env, rp, sg.DeviceProfile("D"), 0).rss[0] for rp in range(41)]
    above_floor = [v for v in rss if v > -100.0]
    assert all(b < a for a, b in zip(above_floor[1:], above_floor[2:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-20, 20), st.floats(0, 15))
def test_rss_always_in_range(seed, offset, sigma):
    env = sg.generate_environment(5, 15, 1, seed)
    fp = sg.sample_fingerprint(env, seed % env.num_rps, sg.DeviceProfile("D", offset, sigma), seed)
    assert all(-100.0 <= v <= 0.0 for v in fp.rss)


class TestEvilTwin:
    def setup_method(self):
        self.env = _env([[0.0, 3.0], [5.0, -2.0], [8.0, 1.0]], [-40.0, -38.0, -42.0])
        self.fp = sg.sample_fingerprint(self.env, 2, sg.DeviceProfile("D"), 0)

    def test_no_rogues_is_identity(self):
        assert sg.apply_evil_twin(self.fp, self.env, sg.RogueConfig(), 2) == self.fp

    def test_colocated_twin_is_invisible(self):
        rogue = sg.RogueConfig((1,), ((5.0, -2.0),), (-38.0,))
        out = sg.apply_evil_twin(self.fp, self.env, rogue, 2)
        np.testing.assert_allclose(out.rss, self.fp.rss, atol=1e-12)

    def test_one_metre_twin(self):
        # rogue 1 m from RP 2 at (2, 0): log10(1) = 0, so rss = tx
        rogue = sg.RogueConfig((0,), ((2.0, 1.0),), (-40.0,))
        assert sg.apply_evil_twin(self.fp, self.env, rogue, 2).rss[0] == -40.0

    def test_only_targets_change(self):
        rogue = sg.RogueConfig((0, 2), ((2.0, 0.5), (3.0, 0.0)), (-30.0, -31.0))
        out = sg.apply_evil_twin(self.fp, self.env, rogue, 2)
        assert out.rss[1] == self.fp.rss[1]
        assert out.rss[0] != self.fp.rss[0] and out.rss[2] != self.fp.rss[2]

    def test_target_out_of_range(self):
        rogue = sg.RogueConfig((7,), ((0.0, 0.0),), (-40.0,))
        with pytest.raises(sg.ScenarioError):
            sg.apply_evil_twin(self.fp, self.env, rogue, 2)

    def test_duplicate_targets_rejected(self):
        with pytest.raises(sg.ScenarioError):
            sg.RogueConfig((1, 1), ((0, 0), (1, 1)), (-40.0, -40.0))


class TestDataset:
    def setup_method(self):
        self.env = sg.generate_environment(6, 9, 1, 2)
        self.devices = [sg.DeviceProfile("A", 0, 2), sg.DeviceProfile("B", -3, 3)]

    def test_cardinality(self):
        db = sg.generate_dataset(self.env, self.devices, 3, sg.RogueConfig(), 0)
        assert len(db) == 10 * 2 * 3

    def test_bit_identical(self):
        a = sg.generate_dataset(self.env, self.devices, 3, sg.RogueConfig(), 4)
        b = sg.generate_dataset(self.env, self.devices, 3, sg.RogueConfig(), 4)
        assert a == b

    def test_rogue_levels_share_clean_data(self):
        full = sg.RogueConfig((0, 2, 4), ((1, 1), (4, -1), (7, 2)), (-35.0, -36.0, -37.0))
        dbs = [sg.generate_dataset(self.env, self.devices, 2, full.first(k), 7) for k in range(4)]
        clean = np.array([fp.rss for fp in dbs[0].fingerprints])
        for k, db in enumerate(dbs[1:], start=1):
            rss = np.array([fp.rss for fp in db.fingerprints])
            changed = np.flatnonzero(np.any(rss != clean, axis=0))
            assert set(changed) <= set(full.target_aps[:k])


def test_scenario_padding_and_ids(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text(
        """
seed = 1
samples_per_rp = 2
[[building]]
id = "X"
num_aps = 3
path_length = 2
[[building]]
id = "Y"
num_aps = 5
path_length = 1
[building.rogue]
targets = [1]
positions = [[0.5, 0.5]]
tx_power_dbm = [-30.0]
[[device]]
id = "D1"
[[device]]
id = "D2"
offset_dbm = 2.0
noise_dbm = 1.0
"""
    )
    scenario = sg.load_scenario(path)
    db = scenario.generate()
    assert db.ap_count == 5
    assert db.buildings == ["X", "Y"]
    assert len(db) == (3 + 2) * 2 * 2
    x_rows = [fp for fp in db.fingerprints if fp.building_id == "X"]
    assert all(fp.rss[3:] == (-100.0, -100.0) for fp in x_rows)
    assert db.building("Y").rp_index == {"Y-RP000": 0, "Y-RP001": 1}


def test_scenario_missing_key():
    with pytest.raises(sg.ScenarioError):
        sg.scenario_from_dict({"building": [{"id": "X"}], "device": [{"id": "D"}]})
