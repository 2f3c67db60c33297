"""Tests for data classes and models."""

import math

import numpy as np
import pytest

from GFormulaLib.core.kernel import LinkFunction, LinkKind
from GFormulaLib.models.data_classes import (
    AnalysisStage,
    ClusterArrays,
    ClusterRecord,
    EstimateReport,
    HouseholdPoint,
    OutcomeDefinition,
    OutcomeModelFit,
    PolicySpec,
    SimStudyResult,
    StudyRow,
    TreatmentModelFit,
)
from GFormulaLib.models.errors import DataValidationError, EmptyDatasetError, SchemaError


def _record(**overrides: object) -> ClusterRecord:
    fields: dict[str, object] = {"id": "c1", "n": 4, "covariates": (1.0,), "s": 0.25, "y": 0.5, "y_denominator": 4}
    fields.update(overrides)
    return ClusterRecord(**fields)  # type: ignore[arg-type]


class TestEnums:
    """Test enumeration classes."""

    def test_outcome_definition_string(self) -> None:
        """Test OutcomeDefinition string formatting."""
        assert str(OutcomeDefinition.OVERALL) == "Overall"
        assert str(OutcomeDefinition.WHEN_TREATED) == "When Treated"

    @pytest.mark.parametrize(
        ("outcome_def", "expected"),
        [(OutcomeDefinition.OVERALL, 8), (OutcomeDefinition.WHEN_TREATED, 3), (OutcomeDefinition.WHEN_UNTREATED, 5)],
    )
    def test_denominator(self, outcome_def: OutcomeDefinition, expected: int) -> None:
        """Test the contributing individuals per definition."""
        assert outcome_def.denominator(8, 0.375) == expected

    def test_stage_string_representation(self) -> None:
        """Test AnalysisStage string formatting and order."""
        assert str(AnalysisStage.FIT) == "Fit"
        assert list(AnalysisStage)[0] is AnalysisStage.INGEST
        assert list(AnalysisStage)[-1] is AnalysisStage.WRITE


class TestClusterRecord:
    """Test ClusterRecord validation."""

    def test_counts(self) -> None:
        """Test treated and event counts."""
        record = _record()
        assert (record.treated, record.events) == (1, 2)
        assert not record.has_strata

    @pytest.mark.parametrize(
        ("overrides", "message"),
        [
            ({"n": 0}, "positive integer"),
            ({"n": 2.0}, "positive integer"),
            ({"s": 1.5}, "outside"),
            ({"s": 0.3}, "not an integer count"),
            ({"y": -0.1}, "outside"),
            ({"y_denominator": -1}, "negative"),
            ({"y": 0.5, "y_denominator": 0}, "must be 0"),
            ({"y": 0.3}, "not an integer count"),
            ({"covariates": (math.nan,)}, "non-finite"),
            ({"s2": 0.5}, "together"),
            ({"s2": 0.5, "n2": 0}, "second-stratum size"),
            ({"s2": 0.4, "n2": 2}, "second-stratum proportion"),
        ],
    )
    def test_invalid(self, overrides: dict[str, object], message: str) -> None:
        """Test each invalid field is rejected with a message naming the cluster."""
        with pytest.raises(DataValidationError, match=message) as excinfo:
            _record(**overrides)
        assert "c1" in str(excinfo.value)

    def test_zero_denominator_is_allowed(self) -> None:
        """Test a cluster without contributing individuals carries y = 0."""
        assert _record(y=0.0, y_denominator=0).events == 0

    def test_strata(self) -> None:
        """Test the second-stratum fields."""
        assert _record(s2=0.5, n2=2).has_strata


class TestClusterArrays:
    """Test ClusterArrays.from_records."""

    def test_columns(self) -> None:
        """Test the column view of a record sequence."""
        arrays = ClusterArrays.from_records([_record(), _record(id="c2", n=2, s=1.0, y=0.0, y_denominator=2, covariates=(3.0,))])
        assert arrays.m == 2
        assert arrays.n_covariates == 1
        np.testing.assert_array_equal(arrays.treated, [1.0, 2.0])
        np.testing.assert_array_equal(arrays.covariates, [[1.0], [3.0]])
        assert not arrays.has_strata

    def test_no_covariates(self) -> None:
        """Test an empty covariate tuple gives an m x 0 matrix."""
        arrays = ClusterArrays.from_records([_record(covariates=())])
        assert arrays.covariates.shape == (1, 0)

    def test_strata_columns(self) -> None:
        """Test second-stratum arrays appear only when every record has them."""
        arrays = ClusterArrays.from_records([_record(s2=0.5, n2=2), _record(id="c2", s2=1.0, n2=3)], require_strata=True)
        np.testing.assert_array_equal(arrays.treated2, [1.0, 3.0])
        mixed = ClusterArrays.from_records([_record(s2=0.5, n2=2), _record(id="c2")])
        assert not mixed.has_strata

    def test_errors(self) -> None:
        """Test empty input, mixed dimensions and missing strata."""
        with pytest.raises(EmptyDatasetError):
            ClusterArrays.from_records([])
        with pytest.raises(DataValidationError, match="dimension"):
            ClusterArrays.from_records([_record(), _record(id="c2", covariates=(1.0, 2.0))])
        with pytest.raises(SchemaError, match="c2"):
            ClusterArrays.from_records([_record(s2=0.5, n2=2), _record(id="c2")], require_strata=True)


class TestFitsAndPolicies:
    """Test the fitted model and policy containers."""

    def test_treatment_fit_with_s2(self) -> None:
        """Test the S2 coefficient is split off the slopes."""
        fit = TreatmentModelFit(np.array([0.1, 0.2, 0.3, 0.4]), LinkFunction(LinkKind.LOGIT), True, 5, -10.0, condition_on_s2=True)
        assert fit.intercept == 0.1
        np.testing.assert_array_equal(fit.slopes, [0.2, 0.3])
        assert fit.s2_coef == 0.4
        plain = TreatmentModelFit(np.array([0.1, 0.2]), LinkFunction(LinkKind.LOGIT), True, 5, -10.0)
        assert plain.s2_coef == 0.0

    def test_outcome_fit_layout(self) -> None:
        """Test the (intercept, slopes, S, S2) layout."""
        fit = OutcomeModelFit(np.array([0.5, 1.0, 2.0, -0.8, 0.3]), LinkFunction(LinkKind.PROBIT), True, 7, -20.0, include_s2=True)
        assert fit.n_covariates == 2
        np.testing.assert_array_equal(fit.slopes, [1.0, 2.0])
        assert fit.s_coef == -0.8
        assert fit.s2_coef == 0.3

    def test_policy_spec(self) -> None:
        """Test solved and two-stratum policies."""
        assert PolicySpec(0.5, 0.2).is_solved
        assert not PolicySpec(0.5, math.nan).is_solved
        strata = PolicySpec(0.5, 0.2, gamma0_strata2=math.nan, alpha_strata2=0.3)
        assert strata.is_strata
        assert not strata.is_solved


class TestReports:
    """Test EstimateReport and SimStudyResult."""

    @pytest.fixture
    def report(self) -> EstimateReport:
        return EstimateReport(
            alpha_grid=(0.4, 0.6),
            gamma0=(-0.1, 0.7),
            mu_hat=(0.42, 0.38),
            se_mu=(0.01, 0.01),
            mu_ci_lower=(0.40, 0.36),
            mu_ci_upper=(0.44, 0.40),
            contrasts=((0.6, 0.4),),
            delta_hat=(-0.04,),
            se_delta=(0.005,),
            delta_ci_lower=(-0.05,),
            delta_ci_upper=(-0.03,),
            outcome_def=OutcomeDefinition.OVERALL,
        )

    def test_lookup(self, report: EstimateReport) -> None:
        """Test named access to estimates."""
        assert report.mu(0.6) == 0.38
        assert report.delta(0.6, 0.4) == -0.04
        with pytest.raises(ValueError):
            report.delta(0.4, 0.6)

    def test_frames(self, report: EstimateReport) -> None:
        """Test the plot-ready grids."""
        estimates, contrasts = report.to_frames()
        assert list(estimates.columns) == ["alpha", "gamma0", "mu_hat", "se", "ci_lower", "ci_upper"]
        assert estimates["mu_hat"].tolist() == [0.42, 0.38]
        assert contrasts.iloc[0].to_dict() == {
            "alpha": 0.6,
            "alpha_prime": 0.4,
            "delta_hat": -0.04,
            "se": 0.005,
            "ci_lower": -0.05,
            "ci_upper": -0.03,
        }

    def test_frames_without_contrasts(self, report: EstimateReport) -> None:
        """Test an empty contrast grid keeps its columns."""
        empty = EstimateReport(**{**report.__dict__, "contrasts": (), "delta_hat": (), "se_delta": (), "delta_ci_lower": (), "delta_ci_upper": ()})
        _, contrasts = empty.to_frames()
        assert contrasts.empty
        assert list(contrasts.columns) == ["alpha", "alpha_prime", "delta_hat", "se", "ci_lower", "ci_upper"]

    def test_study_result(self) -> None:
        """Test failure rate and row lookup."""
        row = StudyRow("mu(0.5)", 0.399, 0.001, 95.0, 0.012, 0.0121, 0.99)
        result = SimStudyResult((row,), replicates=200, failures=4, outcome_def=OutcomeDefinition.OVERALL)
        assert result.failure_rate == pytest.approx(0.02)
        assert result.row("mu(0.5)") is row
        assert result.to_frame().iloc[0]["cov"] == 95.0


class TestHouseholdPoint:
    """Test HouseholdPoint validation."""

    @pytest.mark.parametrize(("lat", "lon"), [(91.0, 0.0), (-90.5, 0.0), (0.0, 180.5), (0.0, -181.0)])
    def test_out_of_range(self, lat: float, lon: float) -> None:
        """Test coordinates outside the sphere are rejected."""
        with pytest.raises(DataValidationError, match="outside"):
            HouseholdPoint("h", lat, lon)

    def test_poles_and_date_line(self) -> None:
        """Test the boundary coordinates are valid."""
        assert HouseholdPoint("h", 90.0, -180.0).members == ()
