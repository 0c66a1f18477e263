"""End-to-end CLI runs on a tiny configuration: outputs, determinism and exit codes."""

import json

import numpy as np
import pytest

from shocktrace import cli, io
from shocktrace import experiments as ex
from shocktrace import shock_trace as st
from shocktrace.reduced import NARParameters

TINY = {"sigma": 1.0, "full": {"nmodes": 32, "spinup": 2.0}, "reduced": {"kmodes": 4},
        "threshold": {"members": 3, "length": 2.0}, "training": {"members": 3, "length": 4.0},
        "prediction": {"realizations": 3, "horizon": 1.0},
        "assimilation": {"realizations": 2, "horizon": 1.0, "window": 0.5, "particles": 20}}

DETERMINISTIC = ["config.json", "thresholds.json", "nar_params.json", "fit_report.csv", "predict_stats.csv",
                 "assimilate_stats.csv", "mask_r0_truth.csv", "mask_r0_nar.csv", "summary.json", "box_stats.csv",
                 "ensemble_threshold.strj", "ensemble_training.strj"]


def pipeline(root, config):
    out = root / "out"
    common = ["--config", str(config), "--out", str(out)]
    for cmd in (["generate"], ["threshold"], ["train"], ["predict"], ["assimilate"]):
        assert cli.main(cmd + common) == 0
    assert cli.main(["report", str(out / "predict_stats.csv"), str(out / "assimilate_stats.csv"),
                     str(out / "ensemble_threshold.strj")] + common) == 0
    return out


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def runs(tmp_path_factory, tiny_config):
    return [pipeline(tmp_path_factory.mktemp(f"run{i}"), tiny_config) for i in range(2)]


class TestPipeline:
    def test_outputs_exist(self, runs):
        for name in DETERMINISTIC + ["predict_timing.csv", "assimilate_timing.csv"]:
            assert (runs[0] / name).is_file(), name

    @pytest.mark.parametrize("name", DETERMINISTIC)
    def test_byte_identical_reruns(self, runs, name):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()

    def test_thresholds_and_params(self, runs):
        doc = json.loads((runs[0] / "thresholds.json").read_text())
        assert set(doc["thresholds"]) == {"4", "8", "32"}
        taus = {k: v["tau"] for k, v in doc["thresholds"].items()}
        assert taus["4"] > taus["8"] > taus["32"]
        params = NARParameters.load(runs[0] / "nar_params.json")
        assert params.kmodes == 4 and params.meta["config_hash"] == doc["config_hash"]

    def test_stats_rows(self, runs):
        lines = (runs[0] / "predict_stats.csv").read_text().splitlines()
        assert lines[0].startswith("realization,seed,model,stage,fp,fn")
        assert len(lines) == 1 + 3 * 2
        assim = (runs[0] / "assimilate_stats.csv").read_text().splitlines()
        assert len(assim) == 1 + 2 * 2 * 2

    def test_summary(self, runs):
        doc = json.loads((runs[0] / "summary.json").read_text())
        assert {"nar/prediction", "truncated/assimilation"} <= set(doc["summary"])
        diag = doc["diagnostics"]["ensemble_threshold.strj"]
        assert 0 <= diag["unresolved_energy_mean"] <= 1

    def test_truth_mask_matches_recomputed(self, runs, tiny_config):
        cfg = ex.load_config(tiny_config)
        doc = json.loads((runs[0] / "thresholds.json").read_text())
        tau = st.ShockThreshold(**doc["thresholds"]["4"])
        truth, _ = ex._truth_run(cfg, cfg.seeds("predict", 1), cfg.prediction.horizon)
        mask = st.shock_trace(truth.member(0), 4, tau, cfg.threshold_spec())
        rows = np.loadtxt(runs[0] / "mask_r0_truth.csv", delimiter=",")
        np.testing.assert_array_equal(rows[:, 0], mask.times)
        np.testing.assert_array_equal(rows[:, 1:].astype(bool), mask.mask)

    def test_realisations_independent_of_batching(self, runs, tiny_config):
        cfg = ex.load_config(tiny_config)
        params = NARParameters.load(runs[0] / "nar_params.json")
        tau = st.ShockThreshold(**json.loads((runs[0] / "thresholds.json").read_text())["thresholds"]["4"])
        together, _ = ex.predict_batch(cfg, params, tau, [1, 2])
        alone, _ = ex.predict_batch(cfg, params, tau, [2])
        assert [r for r in together if r["realization"] == 2] == alone


class TestExitCodes:
    def test_bad_config(self, tmp_path):
        (tmp_path / "c.json").write_text('{"reduced": {"kmodes": 0}}')
        assert cli.main(["generate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2

    def test_bad_seed(self, tmp_path):
        assert cli.main(["generate", "--seed", "-1", "--out", str(tmp_path)]) == 2

    def test_missing_input(self, tmp_path, tiny_config):
        assert cli.main(["threshold", str(tmp_path / "absent.strj"), "--config", str(tiny_config),
                         "--out", str(tmp_path)]) == 4

    def test_not_a_trajectory(self, tmp_path, tiny_config):
        (tmp_path / "x.strj").write_bytes(b"hello")
        assert cli.main(["train", str(tmp_path / "x.strj"), "--config", str(tiny_config),
                         "--out", str(tmp_path)]) == 4

    def test_blow_up(self, tmp_path, tiny_config):
        assert cli.main(["generate", "--stage", "threshold", "--sigma", "1e9", "--config", str(tiny_config),
                         "--out", str(tmp_path)]) == 3

    def test_training_file_without_forcing(self, tmp_path, tiny_config, runs):
        tf = io.read_trajectory(runs[0] / "ensemble_training.strj")
        io.write_trajectory(tmp_path / "t.strj", tf.trajectory)
        assert cli.main(["train", str(tmp_path / "t.strj"), "--config", str(tiny_config),
                         "--out", str(tmp_path)]) == 2

    def test_output_directory_from_environment(self, tmp_path, monkeypatch, tiny_config):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
        assert cli.main(["generate", "--stage", "threshold", "--config", str(tiny_config)]) == 0
        assert (tmp_path / "env" / "ensemble_threshold.strj").is_file()
