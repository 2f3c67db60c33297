"""Tests for the staged analysis runner."""

import json
import time
from collections.abc import Callable
from pathlib import Path

import pandas as pd
import pytest
from pytest_mock import MockerFixture

from GFormulaLib.config.settings import AnalysisConfig, DgpConfig, load_analysis_config
from GFormulaLib.core.estimator import GFormulaEstimator
from GFormulaLib.core.pipeline import CONTRASTS_FILE, ESTIMATES_FILE, MANIFEST_FILE, AnalysisRunner, run_analysis
from GFormulaLib.ingest.readers import read_cluster_csv
from GFormulaLib.models.data_classes import AnalysisStage, ClusterRecord, OutcomeDefinition
from GFormulaLib.models.errors import SingularDesignError, StageError
from GFormulaLib.sim.dgp import generate_dataset
from GFormulaLib.utils import file_system
from tests.conftest import write_cluster_csv

CLUSTER_CONFIG = """
[input]
clusters_csv = "clusters.csv"

[model]
covariates = ["L1", "L2"]

[policy]
alphas = [0.4, 0.5, 0.6]
contrasts = [[0.6, 0.4]]
reference_alpha = 0.5

[run]
check_jacobian = true

[output]
directory = "out"
"""

INDIVIDUAL_CONFIG = """
[input]
individuals_csv = "individuals.csv"

[model]
covariates = ["age"]
standardize_covariates = true

[policy]
alphas = [0.3, 0.6]
contrasts = [[0.6, 0.3]]

[clustering]
threshold_km = 2.0
linkage = "complete"

[output]
directory = "out"
"""

NULL_CONTRAST_CONFIG = """
[input]
clusters_csv = "clusters.csv"

[model]
covariates = ["L1", "L2"]

[policy]
alphas = [0.55]
contrasts = [[0.55, 0.55]]
"""


@pytest.fixture
def cluster_config(cluster_csv: Path, write_config: Callable[..., Path]) -> AnalysisConfig:
    return load_analysis_config(write_config(CLUSTER_CONFIG))


class TestAnalysisRunner:
    """Test AnalysisRunner and run_analysis."""

    def test_full_run_from_cluster_csv(self, cluster_config: AnalysisConfig, tmp_path: Path) -> None:
        """Test every stage runs and the three output files are written."""
        outputs = run_analysis(cluster_config)
        report = outputs.report
        assert report is not None
        assert report.alpha_grid == (0.4, 0.5, 0.6)
        assert report.contrasts == ((0.6, 0.4), (0.4, 0.5), (0.6, 0.5))
        assert report.delta(0.6, 0.4) == pytest.approx(report.mu(0.6) - report.mu(0.4))
        assert all(lo < mu < hi for lo, mu, hi in zip(report.mu_ci_lower, report.mu_hat, report.mu_ci_upper, strict=True))

        assert outputs.estimates_csv == tmp_path / "out" / ESTIMATES_FILE
        estimates = pd.read_csv(tmp_path / "out" / ESTIMATES_FILE)
        assert list(estimates.columns) == ["alpha", "gamma0", "mu_hat", "se", "ci_lower", "ci_upper"]
        assert estimates["mu_hat"].tolist() == pytest.approx(list(report.mu_hat), rel=1e-15)
        contrasts = pd.read_csv(tmp_path / "out" / CONTRASTS_FILE)
        assert len(contrasts) == 3

    def test_manifest_reloads_as_configuration(self, cluster_config: AnalysisConfig, tmp_path: Path) -> None:
        """Test the manifest records the run and its config block loads back unchanged."""
        outputs = run_analysis(cluster_config)
        assert outputs.manifest is not None
        manifest = json.loads(outputs.manifest.read_text(encoding="utf-8"))
        assert manifest["manifest_version"] == 1
        assert manifest["data"]["clusters"] == 250
        assert manifest["fits"]["treatment"]["converged"] is True
        assert len(manifest["policies"]) == 3
        assert manifest["summary"]["max_se"] > 0.0
        assert load_analysis_config(outputs.manifest) == cluster_config

    def test_individual_input_runs_every_stage(self, individuals_csv: Path, write_config: Callable[..., Path]) -> None:
        """Test clustering and aggregation run before the model stages."""
        runner = AnalysisRunner(load_analysis_config(write_config(INDIVIDUAL_CONFIG)))
        outputs = runner.run()
        assert runner.completed_stages == list(AnalysisStage)
        assert len(outputs.records) == 40
        assert outputs.report is not None
        manifest = runner.manifest()
        assert manifest["data"]["households"] > 40
        assert set(manifest["data"]["standardization"]) == {"age"}

    def test_stages_for_cluster_input(self, cluster_config: AnalysisConfig) -> None:
        """Test cluster-level input skips clustering and aggregation."""
        runner = AnalysisRunner(cluster_config)
        assert AnalysisStage.CLUSTER not in runner.stages_to_run()
        assert runner.stages_to_run(AnalysisStage.FIT) == [AnalysisStage.INGEST, AnalysisStage.FIT]

    def test_stop_after_fit(self, cluster_config: AnalysisConfig, tmp_path: Path) -> None:
        """Test a run through FIT fits the models and writes nothing."""
        runner = AnalysisRunner(cluster_config)
        outputs = runner.run(through=AnalysisStage.FIT)
        assert outputs.report is None
        assert runner.completed_stages == [AnalysisStage.INGEST, AnalysisStage.FIT]
        assert set(runner.manifest()["fits"]) == {"treatment", "outcome"}
        assert not (tmp_path / "out").exists()

    def test_failure_is_tagged_with_its_stage(
        self, tmp_path: Path, simulated_records: list[ClusterRecord], write_config: Callable[..., Path]
    ) -> None:
        """Test a single cluster fails at FIT with the data-error exit code."""
        write_cluster_csv(tmp_path / "clusters.csv", simulated_records[:1])
        runner = AnalysisRunner(load_analysis_config(write_config(CLUSTER_CONFIG)))
        with pytest.raises(StageError) as excinfo:
            runner.run()
        assert excinfo.value.stage is AnalysisStage.FIT
        assert isinstance(excinfo.value.cause, SingularDesignError)
        assert excinfo.value.exit_code == 2
        assert runner.failed_stage is AnalysisStage.FIT
        assert str(excinfo.value).startswith("[Fit]")

    def test_partial_outputs_are_removed(self, cluster_config: AnalysisConfig, tmp_path: Path, mocker: MockerFixture) -> None:
        """Test the CSV files are deleted when writing the manifest fails."""
        original = file_system.atomic_write_text

        def failing(path: Path, text: str) -> Path:
            if path.name == MANIFEST_FILE:
                raise OSError("disk full")
            return original(path, text)

        mocker.patch("GFormulaLib.utils.file_system.atomic_write_text", side_effect=failing)
        with pytest.raises(StageError) as excinfo:
            run_analysis(cluster_config)
        assert excinfo.value.stage is AnalysisStage.WRITE
        assert excinfo.value.exit_code == 1
        assert not (tmp_path / "out" / ESTIMATES_FILE).exists()
        assert not (tmp_path / "out" / CONTRASTS_FILE).exists()
        assert not (tmp_path / "out" / MANIFEST_FILE).exists()


class TestAnalysisOracles:
    """Compare run_analysis with direct library calls and known answers."""

    def test_null_contrast_of_the_factual_policy(self, cluster_csv: Path, write_config: Callable[..., Path]) -> None:
        """Test a policy compared with itself gives zero with a zero standard error."""
        config = load_analysis_config(write_config(NULL_CONTRAST_CONFIG))
        report = run_analysis(config).report
        assert report is not None
        assert report.delta_hat == (0.0,)
        assert report.se_delta == (0.0,)
        assert report.se_mu[0] > 0.0

    def test_matches_direct_library_calls(self, cluster_csv: Path, write_config: Callable[..., Path]) -> None:
        """Test ordered-summation estimates equal the estimator run by hand, bit for bit."""
        config = AnalysisConfig.from_cli_args(write_config(CLUSTER_CONFIG), ordered_summation=True)
        assert config.run.ordered_summation
        report = run_analysis(config).report
        assert report is not None

        records = read_cluster_csv(cluster_csv, ["L1", "L2"], OutcomeDefinition.OVERALL)
        direct = GFormulaEstimator(
            alphas=config.policy.alphas, contrasts=config.policy.all_contrasts(), ordered=True, check_jacobian=config.run.check_jacobian
        ).estimate(records)
        assert report.mu_hat == direct.mu_hat
        assert report.gamma0 == direct.gamma0
        assert report.delta_hat == direct.delta_hat
        assert report.se_mu == direct.se_mu
        assert report.se_delta == direct.se_delta

    def test_threads_do_not_change_the_estimates(self, cluster_config: AnalysisConfig) -> None:
        """Test a run on several threads reproduces the single-threaded report exactly."""
        serial = run_analysis(cluster_config).report
        threaded_config = cluster_config.model_copy(update={"run": cluster_config.run.model_copy(update={"threads": 3})})
        runner = AnalysisRunner(threaded_config)
        assert runner.estimator.threads == 3
        threaded = runner.run().report
        assert serial is not None
        assert threaded is not None
        assert threaded.mu_hat == serial.mu_hat
        assert threaded.se_mu == serial.se_mu
        assert threaded.delta_hat == serial.delta_hat

    def test_field_study_shape(self, tmp_path: Path, write_config: Callable[..., Path]) -> None:
        """Test 395 clusters of 19 children over the full policy grid finish within 30 seconds."""
        records = generate_dataset(DgpConfig(m=395, size_law={19: 1.0}), 0)
        assert sum(r.n for r in records) == 7505
        write_cluster_csv(tmp_path / "clusters.csv", records)
        grid = ", ".join(f"{a / 10:.1f}" for a in range(1, 10))
        config = load_analysis_config(
            write_config(
                f'[input]\nclusters_csv = "clusters.csv"\n[model]\ncovariates = ["L1", "L2"]\n'
                f"[policy]\nalphas = [{grid}]\nreference_alpha = 0.55\n[output]\ndirectory = \"out\"\n"
            )
        )
        start = time.perf_counter()
        outputs = run_analysis(config)
        elapsed = time.perf_counter() - start

        assert elapsed < 30.0
        assert len(outputs.records) == 395
        estimates = pd.read_csv(tmp_path / "out" / ESTIMATES_FILE)
        contrasts = pd.read_csv(tmp_path / "out" / CONTRASTS_FILE)
        assert len(estimates) == 10
        assert len(contrasts) == 9
        assert set(contrasts["alpha_prime"]) == {0.55}
        assert estimates["se"].gt(0.0).all()
