"""Tests for the Monte Carlo study harness."""

import statistics

import pytest
from pytest_mock import MockerFixture

from GFormulaLib.config.settings import DgpConfig
from GFormulaLib.models.data_classes import OutcomeDefinition
from GFormulaLib.models.errors import DataValidationError, StudyAbortedError
from GFormulaLib.sim import study
from GFormulaLib.sim.study import ReplicateOutcome, run_replicate, run_study, summarize

ALPHAS = [0.4, 0.5, 0.6]
CONTRASTS = [(0.6, 0.4), (0.6, 0.5), (0.5, 0.4)]


class TestSummarize:
    """Test summarize."""

    def test_known_numbers(self) -> None:
        """Test bias, coverage, ASE, ESE and SER on hand-checked values."""
        row = summarize("mu(0.5)", 0.5, [0.48, 0.50, 0.52, 0.70], [0.02, 0.02, 0.02, 0.02])
        assert row.bias == pytest.approx(0.05)
        # 0.70 is more than 1.96 * 0.02 from the truth
        assert row.coverage == pytest.approx(75.0)
        assert row.ase == pytest.approx(0.02)
        assert row.ese == pytest.approx(statistics.stdev([0.48, 0.50, 0.52, 0.70]))
        assert row.ser == pytest.approx(0.02 / statistics.stdev([0.48, 0.50, 0.52, 0.70]))

    def test_single_replicate(self) -> None:
        """Test ESE and SER are undefined for one replicate."""
        row = summarize("mu(0.5)", 0.5, [0.51], [0.01])
        assert row.ese is None
        assert row.ser is None
        assert row.coverage == 100.0


class TestRunStudy:
    """Test run_study."""

    def test_small_study(self) -> None:
        """Test a short serial study reports every estimand with progress callbacks."""
        calls: list[tuple[int, int]] = []
        result = run_study(DgpConfig(m=125), ALPHAS, CONTRASTS, replicates=4, progress=lambda done, total: calls.append((done, total)))
        assert [r.estimator for r in result.rows] == ["mu(0.4)", "mu(0.5)", "mu(0.6)", "delta(0.6,0.4)", "delta(0.6,0.5)", "delta(0.5,0.4)"]
        assert result.replicates == 4
        assert result.failures == 0
        assert calls[-1] == (4, 4)
        frame = result.to_frame()
        assert list(frame.columns) == ["estimator", "truth", "bias", "cov", "ase", "ese", "ser"]
        assert result.row("mu(0.5)").truth == pytest.approx(0.399, abs=5e-4)
        with pytest.raises(KeyError):
            result.row("mu(0.9)")

    def test_replicates_are_reproducible(self) -> None:
        """Test a replicate depends only on its index."""
        config = DgpConfig(m=60)
        a = run_replicate(config, ALPHAS, CONTRASTS, 2)
        b = run_replicate(config, ALPHAS, CONTRASTS, 2)
        assert not a.failed
        assert a.estimates == b.estimates

    def test_parallel_matches_serial(self) -> None:
        """Test worker processes reproduce the serial summary exactly."""
        config = DgpConfig(m=60)
        serial = run_study(config, ALPHAS, CONTRASTS, replicates=3)
        parallel = run_study(config, ALPHAS, CONTRASTS, replicates=3, workers=2)
        assert parallel.rows == serial.rows
        assert parallel.failures == serial.failures

    def test_failures_are_excluded(self, mocker: MockerFixture) -> None:
        """Test a failure rate at 5% is tolerated and the failed replicate is excluded."""
        original = study.run_replicate

        def flaky(config: DgpConfig, alphas, contrasts, index: int) -> ReplicateOutcome:  # noqa: ANN001
            if index == 0:
                return ReplicateOutcome(index=index, error="ConvergenceError: forced")
            return original(config, alphas, contrasts, index)

        mocker.patch.object(study, "run_replicate", flaky)
        result = run_study(DgpConfig(m=60), [0.5], [], replicates=20)
        assert result.failures == 1
        assert result.failure_rate == pytest.approx(0.05)

    def test_too_many_failures_abort(self, mocker: MockerFixture) -> None:
        """Test more than 5% failed replicates aborts the study."""
        mocker.patch.object(study, "run_replicate", lambda config, alphas, contrasts, index: ReplicateOutcome(index=index, error="boom"))
        with pytest.raises(StudyAbortedError) as excinfo:
            run_study(DgpConfig(m=60), [0.5], [], replicates=3)
        assert excinfo.value.exit_code == 3

    def test_invalid_arguments(self) -> None:
        """Test replicate count and contrast policies are validated."""
        with pytest.raises(DataValidationError):
            run_study(DgpConfig(), ALPHAS, CONTRASTS, replicates=0)
        with pytest.raises(DataValidationError, match="outside"):
            run_study(DgpConfig(), [0.4, 0.5], [(0.6, 0.4)], replicates=2)


@pytest.mark.slow
class TestFullStudy:
    """Full-scale studies (1000 replicates of 125 clusters)."""

    @pytest.fixture(scope="class")
    def overall(self) -> object:
        return run_study(DgpConfig(), ALPHAS, CONTRASTS, replicates=1000, workers=4)

    def test_bias_coverage_and_ratio(self, overall) -> None:  # noqa: ANN001
        """Test every estimand is unbiased, covered at the nominal rate and well calibrated."""
        for row in overall.rows:
            assert abs(row.bias) <= 0.003, row
            assert 92.5 <= row.coverage <= 97.5, row
            assert row.ser is not None and 0.90 <= row.ser <= 1.10, row

    def test_average_standard_error(self, overall) -> None:  # noqa: ANN001
        """Test the averaged sandwich standard error of mu(0.5)."""
        assert overall.row("mu(0.5)").ase == pytest.approx(0.0119, rel=0.15)

    def test_when_treated_is_noisier(self, overall) -> None:  # noqa: ANN001
        """Test fewer contributing individuals inflate the empirical standard error."""
        config = DgpConfig(outcome_def=OutcomeDefinition.WHEN_TREATED)
        when_treated = run_study(config, ALPHAS, CONTRASTS, replicates=1000, workers=4)
        assert when_treated.row("mu(0.4)").ese > overall.row("mu(0.4)").ese
        for row in when_treated.rows:
            assert abs(row.bias) <= 0.003, row
