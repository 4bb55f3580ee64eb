import json

import pytest

from sentinel import cli
from sentinel import dataset as ds
from sentinel.capsnet import TrainingError
from tests.conftest import CONFIGS

TINY_MODEL = """
[split]
train_device = "MOTO"
[model]
conv_filters = 2
conv_kernel = 3
pc_capsules = 2
pc_dim = 4
oc_dim = 4
epochs = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scenario = root / "scenario.toml"
    scenario.write_text(
        """
seed = 5
samples_per_rp = 6
[[building]]
id = "B1"
num_aps = 8
path_length = 4
[[device]]
id = "MOTO"
[[device]]
id = "HTC"
offset_dbm = 2.0
"""
    )
    cfg = root / "train.toml"
    cfg.write_text(TINY_MODEL)
    assert cli.main(["gen", "--config", str(scenario), "--out", str(root / "data")]) == 0
    csv = root / "data" / "fingerprints.csv"
    code = cli.main(["train", "--data", str(csv), "--config", str(cfg), "--out", str(root / "models")])
    assert code == 0
    return root


def test_gen_writes_canonical_csv(workspace):
    db = ds.load_db(workspace / "data" / "fingerprints.csv")
    assert len(db) == 5 * 2 * 6
    assert db.ap_count == 8


def test_train_writes_checkpoint_and_test_split(workspace):
    assert (workspace / "models" / "NONE_B1.ckpt").exists()
    assert len(ds.load_db(workspace / "models" / "test.csv")) == 5 * 2


def test_attack_changes_only_rss(workspace, tmp_path):
    test = workspace / "models" / "test.csv"
    out = tmp_path / "adv.csv"
    args = ["attack", "--models", str(workspace / "models"), "--data", str(test), "--out", str(out)]
    assert cli.main(args + ["--method", "fgsm", "--eps", "0.2", "--phi", "50"]) == 0
    before, after = ds.load_db(test), ds.load_db(out)
    assert [fp.key for fp in before.fingerprints] == [fp.key for fp in after.fingerprints]
    assert before != after


def test_eval_report(workspace, tmp_path, capsys):
    args = ["eval", "--models", str(workspace / "models"), "--data", str(workspace / "models" / "test.csv")]
    assert cli.main(args + ["--out", str(tmp_path), "--method", "NONE"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["count"] == 10
    assert "mean error" in capsys.readouterr().out


@pytest.mark.parametrize("axis, rows", [("phi", 11), ("eps", 6)])
def test_sweep(workspace, tmp_path, axis, rows):
    args = ["sweep", axis, "--models", str(workspace / "models"), "--data", str(workspace / "models" / "test.csv")]
    assert cli.main(args + ["--out", str(tmp_path)]) == 0
    lines = (tmp_path / f"sweep_{axis}.csv").read_text().splitlines()
    assert len(lines) == rows + 1


def test_experiment(tmp_path):
    assert cli.main(["experiment", "--config", str(CONFIGS / "smoke.toml"), "--out", str(tmp_path), "--deterministic"]) == 0
    assert (tmp_path / "summary.json").exists()


class TestExitCodes:
    def test_usage_error_missing_argument(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["eval", "--out", "x"])
        assert err.value.code == cli.EXIT_USAGE

    def test_usage_error_unknown_verb(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["fly"])
        assert err.value.code == cli.EXIT_USAGE

    def test_usage_error_missing_config(self, tmp_path):
        assert cli.main(["experiment", "--out", str(tmp_path)]) == cli.EXIT_USAGE

    def test_data_error_missing_file(self, tmp_path):
        code = cli.main(["train", "--data", str(tmp_path / "none.csv"), "--train-device", "MOTO", "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA

    def test_data_error_bad_csv(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("building_id,rp_id,x_m,y_m,device_id,sample_idx,ap_0\nB,A,0,0,D,0,12\n")
        code = cli.main(["train", "--data", str(bad), "--train-device", "D", "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA

    def test_numeric_failure(self, workspace, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise TrainingError("non-finite loss at epoch 0")

        monkeypatch.setattr(cli, "train_localizer", diverge)
        csv = workspace / "data" / "fingerprints.csv"
        code = cli.main(["train", "--data", str(csv), "--train-device", "MOTO", "--out", str(tmp_path)])
        assert code == cli.EXIT_NUMERIC
