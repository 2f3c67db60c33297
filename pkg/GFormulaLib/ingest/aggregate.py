"""Aggregation of clustered households into cluster-level records."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from GFormulaLib.models.data_classes import ClusterRecord, OutcomeDefinition, Stratum
from GFormulaLib.models.errors import DataValidationError, EmptyDatasetError
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from loguru import Logger

    from GFormulaLib.config.settings import ModelSection
    from GFormulaLib.models.data_classes import HouseholdPoint, Individual

logger: Logger = get_logger(__name__)

SIZE_COVARIATE = "cluster_size"


@dataclass(frozen=True)
class AggregationResult:
    records: list[ClusterRecord]
    dropped_no_outcome: int = 0
    dropped_no_other: int = 0
    covariate_names: tuple[str, ...] = ()
    standardization: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def dropped(self) -> int:
        return self.dropped_no_outcome + self.dropped_no_other


def _outcome_counts(children: Sequence[Individual], outcome_def: OutcomeDefinition) -> tuple[int, int]:
    """(events, denominator) among the measured children the outcome definition counts."""
    if outcome_def is OutcomeDefinition.WHEN_TREATED:
        counted = [c for c in children if c.treated]
    elif outcome_def is OutcomeDefinition.WHEN_UNTREATED:
        counted = [c for c in children if not c.treated]
    else:
        counted = list(children)
    return sum(1 for c in counted if c.outcome), len(counted)


def summarize_clusters(
    points: Sequence[HouseholdPoint],
    assignment: Mapping[str, int],
    model: ModelSection,
) -> AggregationResult:
    """
    Collapses households into one record per cluster.

    Cluster size counts the children whose outcome was measured and the treated share is
    taken among them. Covariates are means over every member of the cluster (children and
    others); the size is appended as a last covariate when configured, and all covariate
    columns are z-scored when standardisation is on (a constant column keeps sd 1). With
    strata, s2 and n2 describe the other members, and clusters without any are dropped.

    :param points: Households read from the individual-level input.
    :param assignment: household_id -> cluster label, as produced by clustering.
    :param model: Model settings (outcome definition, covariates, strata, standardisation).
    :return: The records in cluster-label order plus drop counts and covariate metadata.
    :raises DataValidationError: If a household has no cluster label.
    :raises EmptyDatasetError: If every cluster is dropped.
    """
    members: dict[int, list[Individual]] = defaultdict(list)
    for point in points:
        if point.household_id not in assignment:
            raise DataValidationError(f"Household {point.household_id} has no cluster assignment")
        members[assignment[point.household_id]].extend(point.members)

    names = [*model.covariates, *([SIZE_COVARIATE] if model.include_size_covariate else [])]
    kept: list[tuple[int, list[float], int, int, int, int, int | None, int | None]] = []
    dropped_no_outcome = dropped_no_other = 0
    for label in sorted(members):
        people = members[label]
        children = [p for p in people if p.stratum is Stratum.CHILD and p.outcome is not None]
        if not children:
            dropped_no_outcome += 1
            continue
        others = [p for p in people if p.stratum is Stratum.OTHER]
        if model.strata and not others:
            dropped_no_other += 1
            continue
        covariates = [float(np.mean([p.covariates[c] for p in people])) for c in model.covariates]
        if model.include_size_covariate:
            covariates.append(float(len(children)))
        events, denominator = _outcome_counts(children, model.outcome_def)
        treated = sum(1 for c in children if c.treated)
        treated2 = sum(1 for p in others if p.treated) if model.strata else None
        n2 = len(others) if model.strata else None
        kept.append((label, covariates, len(children), treated, events, denominator, treated2, n2))

    if dropped_no_outcome:
        logger.warning(f"Dropped {dropped_no_outcome} cluster(s) without a child with a measured outcome")
    if dropped_no_other:
        logger.warning(f"Dropped {dropped_no_other} cluster(s) without members in the second stratum")
    if not kept:
        raise EmptyDatasetError("Every cluster was dropped during aggregation")

    matrix = np.array([row[1] for row in kept], dtype=float).reshape(len(kept), len(names))
    standardization: dict[str, tuple[float, float]] = {}
    if model.standardize_covariates and names:
        means = matrix.mean(axis=0)
        sds = matrix.std(axis=0)
        sds[sds == 0.0] = 1.0
        matrix = (matrix - means) / sds
        standardization = {name: (float(mu), float(sd)) for name, mu, sd in zip(names, means, sds, strict=True)}

    records = [
        ClusterRecord(
            id=label,
            n=n,
            covariates=tuple(float(v) for v in matrix[i]),
            s=treated / n,
            y=events / denominator if denominator > 0 else 0.0,
            y_denominator=denominator,
            s2=treated2 / n2 if n2 else None,
            n2=n2,
        )
        for i, (label, _, n, treated, events, denominator, treated2, n2) in enumerate(kept)
    ]
    logger.info(f"Aggregated {len(points)} households into {len(records)} clusters")
    return AggregationResult(
        records=records,
        dropped_no_outcome=dropped_no_outcome,
        dropped_no_other=dropped_no_other,
        covariate_names=tuple(names),
        standardization=standardization,
    )


def aggregate_clusters(points: Sequence[HouseholdPoint], assignment: Mapping[str, int], model: ModelSection) -> list[ClusterRecord]:
    """Cluster records only; see :func:`summarize_clusters` for the drop counts."""
    return summarize_clusters(points, assignment, model).records
