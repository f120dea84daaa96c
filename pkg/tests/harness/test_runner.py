import csv
import json

import numpy as np
import pytest

from src.geoblend.factorization import factorize
from src.geoblend.inference import posterior_mean
from src.geoblend.models import HyperParams, ModelKind
from src.geoblend.prior import build_model
from src.harness.config import parse_config
from src.harness.runner import ExperimentRunner


@pytest.fixture
def reconstruction():
    return parse_config(
        {
            "name": "tiny-reconstruction",
            "kind": "reconstruction",
            "grid": {"nx": 6, "ny": 6},
            "truth": {
                "kappa2": 0.5,
                "lambda2": 0.5,
                "rho_above": [0.9, 0.9, 0.9],
                "rho_below": [-0.9, -0.9, 0.9],
                "interface": {"kind": "flat", "depth": 3.0},
            },
            "observation": {"kind": "identity", "sigma2": 1.0},
            "fit": {"estimate": False},
            "replicates": 2,
            "save_fields": 1,
            "seed": 7,
        }
    )


@pytest.fixture
def identifiability():
    return parse_config(
        {
            "name": "tiny-identifiability",
            "kind": "identifiability",
            "fit_models": ["model2"],
            "grid": {"nx": 6, "ny": 6},
            "truth": {
                "kappa2": 0.5,
                "tau2": 5.0,
                "rho_above": [0.5],
                "rho_below": [-0.5],
                "interface": {"kind": "flat", "depth": 3.0},
                "n_fields": 2,
            },
            "observation": {"kind": "identity", "sigma2": 0.0},
            "fit": {"maxiter": 3},
            "replicates": 3,
            "save_fields": 0,
        }
    )


@pytest.fixture
def blend_range():
    return parse_config(
        {
            "name": "tiny-blend-range",
            "kind": "blend_range",
            "fit_models": ["model2"],
            "grid": {"nx": 8, "ny": 8},
            "truth": {
                "kappa2": 0.5,
                "lambda2": 0.5,
                "rho_above": [0.9, 0.9, 0.9],
                "rho_below": [-0.9, -0.9, 0.9],
                "interface": {"kind": "sine", "baseline": 4.0, "amplitude": 2.0, "period": 8.0},
            },
            "observation": {"kind": "identity", "sigma2": 1.0},
            "blend_search": {"guess": {"kind": "flat", "depth": 4.0}, "lo": 0.0, "hi": 4.0, "n_grid": 3},
            "replicates": 2,
        }
    )


class TestReconstructionRun:
    def test_outputs(self, tmp_path, reconstruction):
        manifest = ExperimentRunner(reconstruction, tmp_path).run()
        assert (tmp_path / "manifest.json").exists()
        assert (tmp_path / "timings.json").exists()
        assert manifest.replicates == 2
        assert len(manifest.rows) == 4
        assert {"mean_err_field1_model2", "mean_err_joint_model1", "wins_model2_over_model1"} <= set(
            manifest.summary
        )

    def test_results_table(self, tmp_path, reconstruction):
        ExperimentRunner(reconstruction, tmp_path).run()
        with open(tmp_path / "results.csv", newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert [row["model"] for row in rows] == ["model2", "model1", "model2", "model1"]
        assert rows[0]["loglik"] == ""
        assert all(0 < float(row["err_field1"]) < 2 for row in rows)

    def test_only_first_replicates_saved(self, tmp_path, reconstruction):
        ExperimentRunner(reconstruction, tmp_path).run()
        directory = tmp_path / "fields" / "replicate-000"
        for stem in ("truth", "prediction-model2", "prediction-model1"):
            assert (directory / f"{stem}.json").exists()
            assert (directory / f"{stem}.bin").exists()
        assert (directory / "truth-field1.pgm").exists()
        assert not (tmp_path / "fields" / "replicate-001").exists()

    def test_rerun_is_byte_identical(self, tmp_path, reconstruction):
        ExperimentRunner(reconstruction, tmp_path / "first").run()
        ExperimentRunner(reconstruction, tmp_path / "second").run()
        for name in ("manifest.json", "results.csv"):
            assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()

    def test_workers_do_not_change_results(self, tmp_path, reconstruction):
        ExperimentRunner(reconstruction, tmp_path / "serial", threads=1).run()
        ExperimentRunner(reconstruction, tmp_path / "parallel", threads=2).run()
        assert (tmp_path / "serial" / "results.csv").read_bytes() == (
            tmp_path / "parallel" / "results.csv"
        ).read_bytes()

    def test_manifest_records_config(self, tmp_path, reconstruction):
        ExperimentRunner(reconstruction, tmp_path).run()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["seed"] == 7
        assert manifest["config"]["name"] == "tiny-reconstruction"
        assert len(manifest["config_hash"]) == 64
        assert "total_seconds" not in manifest


class TestRunnerSteps:
    def test_simulate_is_deterministic(self, tmp_path, reconstruction):
        runner = ExperimentRunner(reconstruction, tmp_path)
        truth, obs = runner.simulate(1)
        again, obs_again = runner.simulate(1)
        np.testing.assert_array_equal(truth, again)
        np.testing.assert_array_equal(obs.d, obs_again.d)
        other, _ = runner.simulate(0)
        assert not np.array_equal(truth, other)
        assert truth.shape == (3 * 36,)

    def test_no_fit_when_estimation_is_off(self, tmp_path, reconstruction):
        runner = ExperimentRunner(reconstruction, tmp_path)
        _, obs = runner.simulate(0)
        assert runner.fit(obs, ModelKind.MODEL2) is None

    def test_predict_lambda_parametrization(self, tmp_path, reconstruction):
        """lambda2 = 0.5 with sigma2 = 2 predicts like tau2 = 0.25 with sigma2 = 2"""
        runner = ExperimentRunner(reconstruction, tmp_path)
        truth, obs = runner.simulate(0)
        base = reconstruction.truth_hyper()
        hyper = HyperParams.model_validate(
            base.model_dump() | {"tau2": None, "lambda2": 0.5, "sigma2": 2.0}
        )
        result = runner.predict(obs, hyper, ModelKind.MODEL2, truth)

        model = build_model(
            ModelKind.MODEL2, base.model_copy(update={"tau2": 0.25}), reconstruction.grid
        )
        noisy = obs.model_copy(update={"operator": obs.operator.model_copy(update={"sigma2": 2.0})})
        expected = posterior_mean(model.Q, noisy, truth)
        np.testing.assert_allclose(result.mean, expected.mean, rtol=1e-10)

    def test_truth_is_a_gmrf_draw(self, tmp_path, reconstruction):
        runner = ExperimentRunner(reconstruction, tmp_path)
        model = build_model(ModelKind.MODEL2, reconstruction.truth_hyper(), reconstruction.grid)
        truth, _ = runner.simulate(0)
        assert np.isfinite(factorize(model.Q).logdet())
        assert np.all(np.isfinite(truth))


class TestIdentifiabilityRun:
    def test_outputs(self, tmp_path, identifiability):
        manifest = ExperimentRunner(identifiability, tmp_path).run()
        assert len(manifest.rows) == 3
        row = manifest.rows[0]
        assert {"above_12", "below_12", "kappa2", "tau2", "loglik", "converged"} <= set(row)
        assert -1 < row["above_12"] < 1
        assert {"mean_above_12", "mean_below_12", "mean_kappa2", "mean_tau2"} <= set(manifest.summary)
        assert not (tmp_path / "fields").exists()

    def test_densities(self, tmp_path, identifiability):
        ExperimentRunner(identifiability, tmp_path).run()
        with open(tmp_path / "densities.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0][0] == "point"
        assert set(rows[0][1:]) <= {"above_12", "below_12"}
        points = [float(row[0]) for row in rows[1:]]
        assert points[0] == pytest.approx(-1.0)
        assert points[-1] == pytest.approx(1.0)


class TestBlendRangeRun:
    def test_outputs(self, tmp_path, blend_range):
        manifest = ExperimentRunner(blend_range, tmp_path).run()
        assert len(manifest.rows) == 2
        for row in manifest.rows:
            assert 0.0 <= row["blend_range"] <= 4.0
            assert row["covers_interface"] == (row["blend_range"] >= 2.0)
            assert row["improvement"] == pytest.approx(row["err_no_blend"] - row["err_blend"])
        assert {"mean_blend_range", "fraction_covering", "mean_improvement"} <= set(manifest.summary)
        directory = tmp_path / "fields" / "replicate-000"
        assert (directory / "prediction-no-blend.json").exists()
        assert (directory / "prediction-blend-field1.pgm").exists()
