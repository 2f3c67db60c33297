"""Monte Carlo study harness: bias, coverage, average and empirical standard errors."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import TYPE_CHECKING

import numpy as np

from GFormulaLib.core.estimator import GFormulaEstimator
from GFormulaLib.core.variance import Z_975
from GFormulaLib.models.data_classes import SimStudyResult, StudyRow
from GFormulaLib.models.errors import DataValidationError, GFormulaError, StudyAbortedError
from GFormulaLib.sim.dgp import analytic_truths, delta_label, generate_dataset, mu_label
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Sequence

    from loguru import Logger

    from GFormulaLib.config.settings import DgpConfig

logger: Logger = get_logger(__name__)

MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class ReplicateOutcome:
    index: int
    estimates: dict[str, float] = field(default_factory=dict)
    standard_errors: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_replicate(config: DgpConfig, alphas: Sequence[float], contrasts: Sequence[tuple[float, float]], index: int) -> ReplicateOutcome:
    """Generates, fits, solves, standardises and computes the sandwich for one replicate."""
    data = generate_dataset(config, index)
    estimator = GFormulaEstimator(alphas=alphas, contrasts=contrasts, outcome_def=config.outcome_def, link=config.link_function)
    try:
        report = estimator.estimate(data)
    except GFormulaError as e:
        return ReplicateOutcome(index=index, error=f"{type(e).__name__}: {e}")

    estimates: dict[str, float] = {}
    standard_errors: dict[str, float] = {}
    for alpha, mu, se in zip(report.alpha_grid, report.mu_hat, report.se_mu, strict=True):
        estimates[mu_label(alpha)] = mu
        standard_errors[mu_label(alpha)] = se
    for (a, b), delta, se in zip(report.contrasts, report.delta_hat, report.se_delta, strict=True):
        estimates[delta_label(a, b)] = delta
        standard_errors[delta_label(a, b)] = se
    return ReplicateOutcome(index=index, estimates=estimates, standard_errors=standard_errors)


def _iterate_replicates(
    worker: Callable[[int], ReplicateOutcome],
    replicates: int,
    workers: int,
) -> Iterable[ReplicateOutcome]:
    if workers <= 1:
        yield from map(worker, range(replicates))
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map keeps replicate order, so the aggregation below is independent of scheduling
        yield from pool.map(worker, range(replicates), chunksize=max(1, replicates // (8 * workers)))


def summarize(label: str, truth: float, estimates: Sequence[float], standard_errors: Sequence[float]) -> StudyRow:
    """
    Aggregates one estimand over successful replicates.

    :param label: Estimand label.
    :param truth: True value.
    :param estimates: Point estimates, one per replicate.
    :param standard_errors: Sandwich standard errors, one per replicate.
    :return: Bias, coverage in percent, ASE, ESE and SER (ESE and SER are None for one replicate).
    """
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(standard_errors, dtype=float)
    covered = np.abs(est - truth) <= Z_975 * se
    ase = float(np.mean(se))
    ese = float(np.std(est, ddof=1)) if est.size >= 2 else None
    ser = ase / ese if ese is not None and ese > 0.0 else None
    return StudyRow(
        estimator=label,
        truth=truth,
        bias=float(np.mean(est)) - truth,
        coverage=100.0 * float(np.mean(covered)),
        ase=ase,
        ese=ese,
        ser=ser,
    )


def run_study(
    config: DgpConfig,
    alphas: Sequence[float],
    contrasts: Sequence[tuple[float, float]],
    replicates: int,
    workers: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> SimStudyResult:
    """
    Runs a full simulation study against the analytic truths.

    Replicates whose fits fail (non-convergence, unsolvable policies, singular sandwich)
    are excluded from every summary and counted. Parallel runs seed each replicate the
    same way as serial runs, so the per-replicate estimates are identical.

    :param config: Data generating law.
    :param alphas: Policies to estimate.
    :param contrasts: Policy pairs for difference contrasts.
    :param replicates: Number of simulated data sets.
    :param workers: Worker processes; 1 runs in-process.
    :param progress: Called with (completed, total) after every replicate.
    :return: One row per estimand, in alpha then contrast order.
    :raises DataValidationError: If ``replicates`` is below 1.
    :raises StudyAbortedError: If more than 5% of the replicates fail.
    """
    if replicates < 1:
        raise DataValidationError(f"replicates must be at least 1, got {replicates}")
    alphas = tuple(float(a) for a in alphas)
    contrasts = tuple((float(a), float(b)) for a, b in contrasts)
    outside = [pair for pair in contrasts if pair[0] not in alphas or pair[1] not in alphas]
    if outside:
        raise DataValidationError(f"Contrasts {outside} use policies outside {alphas}")
    truths = analytic_truths(config, alphas, contrasts)
    logger.info(f"Running {replicates} replicates of m={config.m} clusters ({config.outcome_def.value}) with {workers} worker(s)")

    worker = partial(run_replicate, config, alphas, contrasts)
    outcomes: list[ReplicateOutcome] = []
    for done, outcome in enumerate(_iterate_replicates(worker, replicates, workers), start=1):
        if outcome.failed:
            logger.warning(f"Replicate {outcome.index} excluded: {outcome.error}")
        outcomes.append(outcome)
        if progress is not None:
            progress(done, replicates)

    succeeded = [o for o in outcomes if not o.failed]
    failures = replicates - len(succeeded)
    if failures / replicates > MAX_FAILURE_RATE:
        raise StudyAbortedError(
            f"{failures} of {replicates} replicates failed ({100.0 * failures / replicates:.1f}% > {100.0 * MAX_FAILURE_RATE:g}%)"
        )
    if failures:
        logger.warning(f"{failures} of {replicates} replicates failed and were excluded")

    rows = tuple(
        summarize(
            label,
            truths[label],
            [o.estimates[label] for o in succeeded],
            [o.standard_errors[label] for o in succeeded],
        )
        for label in truths
    )
    return SimStudyResult(rows=rows, replicates=replicates, failures=failures, outcome_def=config.outcome_def)
