import csv
import io
import json

import numpy as np
import pytest

from jointcert.cli import cli_main, compare_baseline, load_config, load_datasets, run_config
from jointcert.data_io import Dataset, synthetic_blobs, write_idx_dataset
from jointcert.errors import ConfigError
from jointcert.evaluation import ibp_verified_error, pgd_error, standard_error
from jointcert.training import TrainConfig, checkpoint_load

MLP = [{"type": "affine", "out_dim": 8}, {"type": "relu"}, {"type": "affine", "out_dim": 2}]


def blob_config(**kw):
    doc = {"eps_train": 0.05, "T_nat": 20, "T_adv": 20, "R": 20, "T_prime": 20, "c_max": 1e-4,
           "total_steps": 30, "batch_size": 32, "lr_schedule": [[0, 0.01]], "seed": 0, "model": MLP,
           "data": {"kind": "blobs", "n_per_class": 100, "d": 2, "separation": 8.0, "seed": 0,
                    "test_n_per_class": 100, "test_seed": 1},
           "eval": {"eps": 0.05, "pgd_steps": 5, "seed": 0}}
    doc.update(kw)
    return doc


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(blob_config()))
    return path


@pytest.fixture
def model_and_data(tmp_path, config_file):
    """A trained checkpoint and an IDX directory holding quantized blob test points."""
    ckpt = tmp_path / "model.json"
    assert cli_main(["train", "--config", str(config_file), "--out", str(ckpt)]) == 0
    test = synthetic_blobs(40, 2, 8.0, 1)
    # IDX stores images; a 1x2 "image" carries the 2-D point at byte precision
    ds = Dataset(np.round(test.images * 255) / 255, test.labels, 2)
    write_idx_dataset(Dataset(ds.images.reshape(-1, 1, 1, 2), ds.labels, 2), str(tmp_path / "data"))
    return ckpt, tmp_path / "data", ds


class TestArgs:
    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["eval", "--model", "m.json"],
                                      ["eval", "--model", "m", "--data", "d", "--eps", "abc"]])
    def test_usage_errors(self, argv, capsys):
        assert cli_main(argv) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli_main(["train", "--config", str(tmp_path / "nope.json")]) == 2
        assert capsys.readouterr().err.startswith("jointcert:")

    @pytest.mark.parametrize("text", ["{oops", "[1, 2]", json.dumps(blob_config(typo=1)),
                                      json.dumps(blob_config(data={"kind": "cifar"})),
                                      json.dumps(blob_config(data={"kind": "blobs", "colour": 1})),
                                      json.dumps(blob_config(eval={"epsilon": 0.1})),
                                      json.dumps(blob_config(model=[{"type": "pool"}]))])
    def test_bad_config(self, tmp_path, text):
        path = tmp_path / "bad.json"
        path.write_text(text)
        assert cli_main(["train", "--config", str(path)]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_runtime_failure_exit_3(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(blob_config(lr_schedule=[[0, 1e300]], optimizer="sgd")))
        assert cli_main(["train", "--config", str(path)]) == 3

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "m.json").write_text("{}")
        assert cli_main(["eval", "--model", str(tmp_path / "m.json"), "--data", str(tmp_path), "--eps", "0.1"]) == 2


class TestTrain:
    def test_outputs(self, tmp_path, config_file, capsys):
        ckpt, log = tmp_path / "m.json", tmp_path / "log.csv"
        assert cli_main(["train", "--config", str(config_file), "--out", str(ckpt), "--log", str(log)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["n_examples"] == 200
        rows = list(csv.reader(log.open()))
        assert rows[0][0] == "step" and len(rows) == 31
        net, state = checkpoint_load(str(ckpt))
        assert state.t == 29


class TestEval:
    def test_eps_zero_consistency(self, model_and_data, capsys):
        ckpt, data, ds = model_and_data
        capsys.readouterr()
        assert cli_main(["eval", "--model", str(ckpt), "--data", str(data), "--eps", "0", "--pgd-steps", "3"]) == 0
        report = json.loads(capsys.readouterr().out)
        net, _ = checkpoint_load(str(ckpt))
        assert report["standard_error"] == report["pgd_error"] == standard_error(net, ds)
        assert report["verified_error"] == ibp_verified_error(net, ds, 0.0)

    def test_matches_library(self, model_and_data, capsys):
        ckpt, data, ds = model_and_data
        capsys.readouterr()
        cli_main(["eval", "--model", str(ckpt), "--data", str(data), "--eps", "0.05", "--pgd-steps", "7",
                  "--seed", "4"])
        report = json.loads(capsys.readouterr().out)
        net, _ = checkpoint_load(str(ckpt))
        assert report["pgd_error"] == pgd_error(net, ds, 0.05, 7, seed=4)
        assert report["verified_error"] == ibp_verified_error(net, ds, 0.05)

    def test_verify_csv(self, model_and_data, capsys):
        ckpt, data, ds = model_and_data
        capsys.readouterr()
        assert cli_main(["verify", "--model", str(ckpt), "--data", str(data), "--eps", "0.05"]) == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[0] == ["index", "label", "prediction", "min_margin_lower", "verified"]
        assert len(rows) == len(ds) + 1
        net, _ = checkpoint_load(str(ckpt))
        unverified = sum(r[4] == "false" for r in rows[1:])
        assert unverified / len(ds) == ibp_verified_error(net, ds, 0.05)

    def test_dimension_mismatch(self, tmp_path, model_and_data):
        ckpt, _, _ = model_and_data
        write_idx_dataset(Dataset(np.zeros((2, 1, 2, 2)), [0, 1], 2), str(tmp_path / "d4"))
        assert cli_main(["eval", "--model", str(ckpt), "--data", str(tmp_path / "d4"), "--eps", "0.1"]) == 2


class TestCompareBaseline:
    def test_reports_both_modes(self, config_file, capsys):
        assert cli_main(["compare-baseline", "--config", str(config_file)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["joint_verified_error"] == out["joint"]["verified_error"]
        assert out["baseline_verified_error"] == out["baseline"]["verified_error"]
        b = out["baseline_verified_error"]
        expected = (b - out["joint_verified_error"]) / b if b > 0 else 0.0
        assert out["relative_reduction"] == pytest.approx(expected)
        assert out["joint"]["model_id"] != out["baseline"]["model_id"]

    def test_mode_is_the_only_difference(self, config_file):
        cfg = load_config(str(config_file))
        out = compare_baseline(cfg)
        d = cfg.to_dict()
        d["mode"] = "baseline"
        _, report = run_config(TrainConfig.from_dict(d))
        assert out["baseline"] == report.to_dict()


class TestDatasets:
    def test_mnist_requires_dir(self):
        with pytest.raises(ConfigError):
            load_datasets({"kind": "mnist"})

    def test_mnist_relative_dir(self, tmp_path):
        d = tmp_path / "mn"
        write_idx_dataset(Dataset(np.zeros((3, 1, 4, 4)), [0, 1, 2], 10), str(d), "train")
        write_idx_dataset(Dataset(np.zeros((2, 1, 4, 4)), [3, 4], 10), str(d), "t10k")
        tr, te = load_datasets({"kind": "mnist", "dir": "mn", "train_limit": 2, "flatten": True}, str(tmp_path))
        assert tr.images.shape == (2, 16) and te.labels.tolist() == [3, 4]
