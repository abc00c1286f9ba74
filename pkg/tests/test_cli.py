import csv
import json

import numpy as np
import pytest
import yaml

from ergmsbi import __version__
from ergmsbi.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, ConfigError, load_config, main
from ergmsbi.flow import MafModel

TINY = {
    "seed": 3,
    "sim": {"n": 5, "iterations": 100},
    "npe": {"B": 400, "epochs": 3, "batch_size": 100, "num_transforms": 2, "hidden_units": 8},
    "snpe": {"rounds": 1, "per_round_B": 400, "diagnostic_draws": 200, "round_draws": 100},
    "exchange": {"T": 30, "burn_in": 5},
    "harness": {"M": 2, "posterior_draws": 50, "predictive_draws": 3},
    "compare": {"M": 2},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def rows(path):
    return list(csv.reader(open(path)))


def test_config_precedence_and_rejection(config, tmp_path):
    cfg = load_config(config, ["sim.n=7", "npe.learning_rate=0.01"], seed=11)
    assert cfg["sim"]["n"] == 7 and cfg["sim"]["iterations"] == 100
    assert cfg["npe"]["learning_rate"] == 0.01
    assert cfg["seed"] == 11
    with pytest.raises(ConfigError):
        load_config(config, ["sim.vertices=7"])
    bad = tmp_path / "bad.yaml"
    bad.write_text("sim:\n  n: 5\n  colour: red\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    assert main(["simulate", "-c", str(bad), "-o", str(tmp_path / "x")]) == EXIT_CONFIG


def test_dimension_mismatch_is_config_error(config, tmp_path):
    assert main(["simulate", "-c", str(config), "-o", str(tmp_path), "--set", "prior.mean=[0, 0]"]) == EXIT_CONFIG
    assert main(["exchange", "-c", str(config), "-o", str(tmp_path), "--x-obs", "1,2"]) == EXIT_CONFIG


def test_simulate_counts_and_reproducibility(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "-c", str(config), "-o", str(a), "--set", "simulate.B=10", "--workers", "1"]) == EXIT_OK
    assert main(["simulate", "-c", str(config), "-o", str(b), "--set", "simulate.B=10", "--workers", "2"]) == EXIT_OK
    data = rows(a / "train.csv")
    assert data[0] == ["theta_1", "theta_2", "theta_3", "x_1", "x_2", "x_3", "round"]
    assert len(data) == 11
    assert (a / "train.csv").read_bytes() == (b / "train.csv").read_bytes()
    manifest = json.loads((a / "manifest_simulate.json").read_text())
    assert manifest["tool_version"] == __version__
    assert manifest["pairs"] == 10 and manifest["seed"] == 3
    assert len(manifest["config_hash"]) == 64


def test_simulate_empty_theta_list(config, tmp_path):
    assert main(["simulate", "-c", str(config), "-o", str(tmp_path), "--set", "simulate.thetas=[]"]) == EXIT_OK
    assert rows(tmp_path / "train.csv") == [["theta_1", "theta_2", "theta_3", "x_1", "x_2", "x_3", "round"]]


def test_train_round_trip_and_single_round_snpe(config, tmp_path):
    npe_dir, snpe_dir = tmp_path / "npe", tmp_path / "snpe"
    assert main(["train", "-c", str(config), "-o", str(npe_dir)]) == EXIT_OK
    x_obs = "4,1.5,3"
    assert main(["train", "-c", str(config), "-o", str(snpe_dir), "--mode", "snpe", "--x-obs", x_obs]) == EXIT_OK
    a = MafModel.load(npe_dir / "model.json")
    b = MafModel.load(snpe_dir / "model.json")
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    probe = np.random.default_rng(0).normal(size=(20, 3))
    xs = np.tile([4.0, 1.5, 3.0], (20, 1))
    reloaded = MafModel.from_dict(json.loads((npe_dir / "model.json").read_text()))
    np.testing.assert_allclose(reloaded.log_prob(probe, xs), a.log_prob(probe, xs), atol=1e-12)
    manifest = json.loads((npe_dir / "manifest_train.json").read_text())
    assert len(manifest["val_loss"]) >= 1
    rounds = rows(snpe_dir / "snpe_rounds.csv")
    assert rounds[0] == ["round", "theta_1", "theta_2", "theta_3"] and len(rounds) == 101


def test_train_from_dataset(config, tmp_path):
    assert main(["simulate", "-c", str(config), "-o", str(tmp_path)]) == EXIT_OK
    out = tmp_path / "model"
    assert main(["train", "-c", str(config), "-o", str(out), "--set", f"dataset={tmp_path / 'train.csv'}"]) == EXIT_OK
    assert (out / "model.json").exists()


def test_snpe_without_observation_is_config_error(config, tmp_path):
    assert main(["train", "-c", str(config), "-o", str(tmp_path), "--mode", "snpe"]) == EXIT_CONFIG


def test_sample_command(config, tmp_path):
    ckpt = tmp_path / "identity.json"
    MafModel(3, 3, num_transforms=2, hidden_units=8).save(ckpt)
    args = ["sample", "-c", str(config), "--checkpoint", str(ckpt), "--x-obs", "1,2,3"]
    assert main(args + ["-o", str(tmp_path / "one"), "--count", "1"]) == EXIT_OK
    assert len(rows(tmp_path / "one" / "samples.csv")) == 2
    assert main(args + ["-o", str(tmp_path / "a"), "--count", "20000"]) == EXIT_OK
    assert main(args + ["-o", str(tmp_path / "b"), "--count", "20000"]) == EXIT_OK
    assert (tmp_path / "a" / "samples.csv").read_bytes() == (tmp_path / "b" / "samples.csv").read_bytes()
    draws = np.loadtxt(tmp_path / "a" / "samples.csv", delimiter=",", skiprows=1)
    assert np.all(np.abs(draws.mean(axis=0)) < 0.05)
    assert np.all(np.abs(draws.std(axis=0) - 1) < 0.05)
    manifest = json.loads((tmp_path / "a" / "manifest_sample.json").read_text())
    assert manifest["leakage"] == 0.0


def test_sample_leakage_exit_code(config, tmp_path):
    model = MafModel(3, 3, num_transforms=1, hidden_units=8, hidden_layers=1)
    model.params["0.bm"][:] = 1e3
    ckpt = tmp_path / "shifted.json"
    model.save(ckpt)
    code = main(["sample", "-c", str(config), "-o", str(tmp_path), "--checkpoint", str(ckpt),
                 "--x-obs", "1,2,3", "--truncate"])
    assert code == EXIT_NUMERICAL


def test_exchange_command(config, tmp_path, capsys):
    assert main(["exchange", "-c", str(config), "-o", str(tmp_path), "--x-obs", "4,2,5"]) == EXIT_OK
    assert "acceptance rate" in capsys.readouterr().out
    assert len(rows(tmp_path / "chain.csv")) == 32


def test_evaluate_and_compare(config, tmp_path):
    ckpt = tmp_path / "identity.json"
    MafModel(3, 3, num_transforms=2, hidden_units=8).save(ckpt)
    cases = ["--set", "harness.cases=[[-1, 0, 0], [0, 0.2, -0.2]]"]
    out = tmp_path / "eval"
    assert main(["evaluate", "-c", str(config), "-o", str(out), "--checkpoint", str(ckpt), "--figures"] + cases) == 0
    summary = json.loads((out / "bias_summary.json").read_text())
    me, mae, rmse = (np.array(summary["bias"][k]) for k in ("me", "mae", "rmse"))
    assert np.all(np.abs(me) <= mae + 1e-12) and np.all(mae <= rmse + 1e-12)
    assert (out / "bias_cases.png").exists()
    out = tmp_path / "cmp"
    assert main(["compare", "-c", str(config), "-o", str(out), "--checkpoint", str(ckpt), "--figures"] + cases) == 0
    assert len(rows(out / "paired_case0.csv")) == 1 + 2 * 2
    assert (out / "paired_case0.png").exists()
    assert main(["evaluate", "-c", str(config), "-o", str(out), "--checkpoint", str(ckpt),
                 "--set", "harness.cases=[]"]) == EXIT_CONFIG


def test_selftest_and_figures(config, tmp_path, capsys):
    assert main(["selftest"]) == EXIT_OK
    assert capsys.readouterr().out.count("PASS") == 4
    assert main(["figures", "-c", str(config), str(tmp_path)]) == EXIT_OK
