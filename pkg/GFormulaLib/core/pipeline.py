"""Staged orchestration of a full analysis, from CSV input to output files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime
from typing import TYPE_CHECKING, Any

import numpy as np

from GFormulaLib.core.estimator import GFormulaEstimator
from GFormulaLib.ingest.aggregate import summarize_clusters
from GFormulaLib.ingest.geo import cluster_households
from GFormulaLib.ingest.readers import read_cluster_csv, read_individuals_csv
from GFormulaLib.models.data_classes import AnalysisStage, TreatmentModelFit
from GFormulaLib.models.errors import StageError
from GFormulaLib.utils import file_system as fs
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from collections.abc import Callable
    from datetime import timedelta
    from pathlib import Path

    from loguru import Logger

    from GFormulaLib.config.settings import AnalysisConfig
    from GFormulaLib.ingest.aggregate import AggregationResult
    from GFormulaLib.models.data_classes import ClusterRecord, EstimateReport, HouseholdPoint, OutcomeModelFit

logger: Logger = get_logger(__name__)

ESTIMATES_FILE = "estimates.csv"
CONTRASTS_FILE = "contrasts.csv"
MANIFEST_FILE = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class AnalysisOutputs:
    report: EstimateReport | None = None
    records: list[ClusterRecord] = field(default_factory=list)
    estimates_csv: Path | None = None
    contrasts_csv: Path | None = None
    manifest: Path | None = None


def _fit_summary(fit: TreatmentModelFit | OutcomeModelFit) -> dict[str, Any]:
    coefficients = fit.rho if isinstance(fit, TreatmentModelFit) else fit.beta
    return {
        "coefficients": [float(c) for c in coefficients],
        "link": fit.link.kind.value,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "loglik": fit.loglik,
    }


class AnalysisRunner:
    """Runs the analysis stages in order and keeps track of where it stopped."""

    def __init__(self, config: AnalysisConfig) -> None:
        self.config = config
        self.start_time: datetime | None = None
        self.current_stage: AnalysisStage | None = None
        self.completed_stages: list[AnalysisStage] = []
        self.failed_stage: AnalysisStage | None = None

        self.points: list[HouseholdPoint] = []
        self.assignment: dict[str, int] = {}
        self.aggregation: AggregationResult | None = None
        self.outputs = AnalysisOutputs()
        self.estimator = GFormulaEstimator(
            alphas=config.policy.alphas,
            contrasts=config.policy.all_contrasts(),
            outcome_def=config.model.outcome_def,
            link=config.model.link_function,
            strata=config.model.strata,
            alphas_strata2=config.policy.alphas_strata2,
            ordered=config.run.ordered_summation,
            check_jacobian=config.run.check_jacobian,
            threads=config.run.threads,
        )
        self._written: list[Path] = []

    @property
    def from_individuals(self) -> bool:
        return self.config.input.individuals_csv is not None

    def stages_to_run(self, through: AnalysisStage | None = None) -> list[AnalysisStage]:
        """
        Lists the stages of this run. Cluster-level input skips clustering and aggregation.

        :param through: Last stage to run; None runs everything including the output files.
        """
        stages = [s for s in AnalysisStage if self.from_individuals or s not in {AnalysisStage.CLUSTER, AnalysisStage.AGGREGATE}]
        if through is not None:
            stages = [s for s in stages if s.value <= through.value]
        return stages

    def run(self, through: AnalysisStage | None = None) -> AnalysisOutputs:
        """
        Executes the analysis stage by stage.

        :param through: Stop after this stage (e.g. FIT for a model-only run).
        :return: Whatever the executed stages produced.
        :raises StageError: Wrapping the first error, tagged with the stage that raised it.
            Files already written by the WRITE stage are removed.
        """
        logger.info(f"Starting analysis of {self.config.input.source.name}")
        self.start_time = datetime.now()
        for stage in self.stages_to_run(through):
            self.current_stage = stage
            logger.info(f"Executing stage: {stage}")
            try:
                self._execute_stage(stage)
            except (KeyboardInterrupt, SystemExit):
                self._remove_partial_outputs()
                raise
            except Exception as e:
                self.failed_stage = stage
                logger.error(f"Stage {stage} failed: {e}")
                self._remove_partial_outputs()
                raise StageError(stage, e) from e
            self.completed_stages.append(stage)
            logger.debug(f"Completed stage: {stage}")

        elapsed: timedelta = datetime.now() - self.start_time
        logger.success(f"Analysis completed in {elapsed}")
        return self.outputs

    def _execute_stage(self, stage: AnalysisStage) -> None:
        stage_map: dict[AnalysisStage, Callable[[], None]] = {
            AnalysisStage.INGEST: self._stage_ingest,
            AnalysisStage.CLUSTER: self._stage_cluster,
            AnalysisStage.AGGREGATE: self._stage_aggregate,
            AnalysisStage.FIT: lambda: self._with_records(self.estimator.fit_models),
            AnalysisStage.SOLVE: lambda: self._with_records(self.estimator.solve_policies),
            AnalysisStage.ESTIMATE: lambda: self._with_records(self.estimator.standardize),
            AnalysisStage.VARIANCE: self._stage_variance,
            AnalysisStage.WRITE: self._stage_write,
        }
        stage_map[stage]()

    def _with_records(self, action: Callable[[list[ClusterRecord]], object]) -> None:
        action(self.outputs.records)

    def _stage_ingest(self) -> None:
        model = self.config.model
        if self.config.input.individuals_csv is not None:
            self.points = read_individuals_csv(self.config.input.individuals_csv, model.covariates)
        else:
            assert self.config.input.clusters_csv is not None
            self.outputs.records = read_cluster_csv(self.config.input.clusters_csv, model.covariates, model.outcome_def)

    def _stage_cluster(self) -> None:
        clustering = self.config.clustering
        self.assignment = cluster_households(self.points, clustering.threshold_km, clustering.linkage)

    def _stage_aggregate(self) -> None:
        self.aggregation = summarize_clusters(self.points, self.assignment, self.config.model)
        self.outputs.records = self.aggregation.records

    def _stage_variance(self) -> None:
        self.estimator.compute_variance(self.outputs.records)
        self.outputs.report = self.estimator.report()
        logger.info(f"Sandwich condition number {self.outputs.report.condition_number:.3g}")

    def _stage_write(self) -> None:
        report = self.outputs.report
        assert report is not None
        directory = self.config.output.directory
        fs.ensure_directory(directory)
        estimates, contrasts = report.to_frames()

        self.outputs.estimates_csv = self._track(fs.atomic_write_frame(directory / ESTIMATES_FILE, estimates))
        self.outputs.contrasts_csv = self._track(fs.atomic_write_frame(directory / CONTRASTS_FILE, contrasts))
        manifest = json.dumps(self.manifest(), indent=2, allow_nan=True)
        self.outputs.manifest = self._track(fs.atomic_write_text(directory / MANIFEST_FILE, manifest + "\n"))
        logger.info(f"Wrote results to {directory}")

    def _track(self, path: Path) -> Path:
        self._written.append(path)
        return path

    def _remove_partial_outputs(self) -> None:
        left_behind = fs.remove_files(self._written)
        if left_behind:
            logger.warning(f"Partial outputs could not be removed: {', '.join(str(p) for p in left_behind)}")
        self._written.clear()

    def manifest(self) -> dict[str, Any]:
        """Everything needed to reproduce the run; its ``config`` block loads as a configuration."""
        models = self.estimator.models
        report = self.outputs.report
        fits: dict[str, Any] = {}
        if models is not None:
            fits["treatment"] = _fit_summary(models.treatment)
            fits["outcome"] = _fit_summary(models.outcome)
            if models.treatment_s2 is not None:
                fits["treatment_s2"] = _fit_summary(models.treatment_s2)
        aggregation = self.aggregation
        return {
            "manifest_version": MANIFEST_VERSION,
            "created": (self.start_time or datetime.now()).isoformat(timespec="seconds"),
            "config": self.config.model_dump(mode="json"),
            "data": {
                "clusters": len(self.outputs.records),
                "individuals": sum(r.n for r in self.outputs.records),
                "households": len(self.points) or None,
                "dropped_no_outcome": aggregation.dropped_no_outcome if aggregation else 0,
                "dropped_no_other": aggregation.dropped_no_other if aggregation else 0,
                "covariates": list(aggregation.covariate_names) if aggregation else list(self.config.model.covariates),
                "standardization": {k: list(v) for k, v in aggregation.standardization.items()} if aggregation else {},
            },
            "fits": fits,
            "policies": [
                {"alpha": p.alpha, "gamma0": p.gamma0, "residual": p.residual, "gamma0_strata2": p.gamma0_strata2, "alpha_strata2": p.alpha_strata2}
                for p in self.estimator.policies
            ],
            "condition_number": report.condition_number if report else None,
            "summary": {
                "mu": {repr(float(a)): m for a, m in zip(report.alpha_grid, report.mu_hat, strict=True)} if report else {},
                "delta": {f"{float(a)!r},{float(b)!r}": d for (a, b), d in zip(report.contrasts, report.delta_hat, strict=True)} if report else {},
                "max_se": float(np.max(report.se_mu)) if report and report.se_mu else None,
            },
        }


def run_analysis(config: AnalysisConfig, through: AnalysisStage | None = None) -> AnalysisOutputs:
    """
    Runs the whole analysis described by ``config``.

    :param config: Validated analysis configuration.
    :param through: Optional last stage; the default writes estimates.csv, contrasts.csv
        and manifest.json to ``config.output.directory``.
    :return: The estimate report, the analysed cluster records and the written paths.
    :raises StageError: If any stage fails.
    """
    return AnalysisRunner(config).run(through)
