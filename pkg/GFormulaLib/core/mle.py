"""Maximum likelihood for the binomial treatment and outcome models."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy import special

from GFormulaLib.models.data_classes import ClusterArrays, ClusterRecord, OutcomeDefinition, OutcomeModelFit, TreatmentModelFit
from GFormulaLib.models.errors import DataValidationError, EmptyLikelihoodError, SchemaError, SingularDesignError
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from loguru import Logger
    from numpy.typing import NDArray

    from GFormulaLib.core.kernel import LinkFunction

logger: Logger = get_logger(__name__)

MAX_ITERATIONS = 100
MAX_HALVINGS = 30
SCORE_TOLERANCE = 1e-8
STEP_TOLERANCE = 1e-6
ETA_BOUND = 30.0

ClusterData = ClusterArrays | Sequence[ClusterRecord]


def as_arrays(data: ClusterData, require_strata: bool = False) -> ClusterArrays:
    if isinstance(data, ClusterArrays):
        if require_strata and not data.has_strata:
            raise SchemaError("Cluster data lacks the second-stratum fields s2/n2")
        return data
    return ClusterArrays.from_records(data, require_strata=require_strata)


@dataclass(frozen=True)
class BinomialDesign:
    """Binomial regression problem: ``successes`` of ``trials`` with mean g^-1(X @ coef)."""

    X: NDArray[np.float64]
    trials: NDArray[np.float64]
    successes: NDArray[np.float64]

    @property
    def n_coef(self) -> int:
        return int(self.X.shape[1])

    def eta(self, coef: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.X @ coef

    def loglik(self, coef: NDArray[np.float64], link: LinkFunction) -> float:
        eta = self.eta(coef)
        failures = self.trials - self.successes
        log_choose = special.gammaln(self.trials + 1.0) - special.gammaln(self.successes + 1.0) - special.gammaln(failures + 1.0)
        # 0 * log(0) terms vanish for the empty-denominator rows
        ll = log_choose + np.where(self.successes > 0, self.successes * link.log_inverse(eta), 0.0)
        ll += np.where(failures > 0, failures * link.log_inverse_complement(eta), 0.0)
        return float(np.sum(ll))

    def score_contributions(self, coef: NDArray[np.float64], link: LinkFunction) -> NDArray[np.float64]:
        """Per-cluster score vectors, shape (m, p)."""
        eta = self.eta(coef)
        residual = (self.successes - self.trials * link.inverse(eta)) * link.score_weight(eta)
        return self.X * residual[:, None]

    def score(self, coef: NDArray[np.float64], link: LinkFunction) -> NDArray[np.float64]:
        return self.score_contributions(coef, link).sum(axis=0)

    def hessian(self, coef: NDArray[np.float64], link: LinkFunction) -> NDArray[np.float64]:
        """Observed Hessian of the summed log-likelihood."""
        eta = self.eta(coef)
        mu = link.inverse(eta)
        weight = -self.trials * link.density(eta) * link.score_weight(eta)
        weight += (self.successes - self.trials * mu) * link.score_weight_derivative(eta)
        return (self.X * weight[:, None]).T @ self.X

    def information(self, coef: NDArray[np.float64], link: LinkFunction) -> NDArray[np.float64]:
        """Expected information; equal to minus the observed Hessian under the logit link."""
        eta = self.eta(coef)
        weight = self.trials * link.density(eta) * link.score_weight(eta)
        return (self.X * weight[:, None]).T @ self.X


@dataclass(frozen=True)
class NewtonResult:
    coef: NDArray[np.float64]
    converged: bool
    iterations: int
    loglik: float


def treatment_design(data: ClusterData, stratum: int = 1, condition_on_s2: bool = False) -> BinomialDesign:
    """
    Builds the design for the factual treatment model.

    :param data: Cluster records or their column view.
    :param stratum: 1 models s*n of n; 2 models s2*n2 of n2 (second stratum).
    :param condition_on_s2: Adds S2 as a linear covariate (stratum 1 only).
    :return: The binomial design.
    :raises SchemaError: If the second-stratum fields are required but missing.
    :raises DataValidationError: If ``stratum`` is not 1 or 2.
    """
    if stratum not in (1, 2):
        raise DataValidationError(f"Stratum must be 1 or 2, got {stratum}")
    arrays = as_arrays(data, require_strata=stratum == 2 or condition_on_s2)
    columns = [np.ones(arrays.m), *arrays.covariates.T]
    if stratum == 2:
        assert arrays.n2 is not None and arrays.treated2 is not None
        return BinomialDesign(np.column_stack(columns), arrays.n2.astype(float), arrays.treated2)
    if condition_on_s2:
        assert arrays.s2 is not None
        columns.append(arrays.s2)
    return BinomialDesign(np.column_stack(columns), arrays.n.astype(float), arrays.treated)


def expected_denominators(arrays: ClusterArrays, outcome_def: OutcomeDefinition) -> NDArray[np.float64]:
    if outcome_def is OutcomeDefinition.OVERALL:
        return arrays.n.astype(float)
    if outcome_def is OutcomeDefinition.WHEN_TREATED:
        return arrays.treated.copy()
    return arrays.n - arrays.treated


def outcome_design(data: ClusterData, outcome_def: OutcomeDefinition, include_s2: bool = False) -> BinomialDesign:
    arrays = as_arrays(data, require_strata=include_s2)
    expected = expected_denominators(arrays, outcome_def)
    mismatch = np.flatnonzero(expected != arrays.y_denominator)
    if mismatch.size:
        i = int(mismatch[0])
        raise DataValidationError(
            f"{mismatch.size} cluster(s) have an outcome denominator inconsistent with '{outcome_def.value}' "
            f"(first at position {i}: {arrays.y_denominator[i]:g} != {expected[i]:g})"
        )
    columns = [np.ones(arrays.m), *arrays.covariates.T, arrays.s]
    if include_s2:
        assert arrays.s2 is not None
        columns.append(arrays.s2)
    return BinomialDesign(np.column_stack(columns), arrays.y_denominator.copy(), arrays.events.copy())


def _check_design(design: BinomialDesign, label: str) -> None:
    active = design.X[design.trials > 0]
    if active.shape[0] < design.n_coef or np.linalg.matrix_rank(active) < design.n_coef:
        raise SingularDesignError(
            f"{label} design is rank deficient: {design.n_coef} coefficients, {active.shape[0]} informative clusters"
        )


def _starting_values(design: BinomialDesign, link: LinkFunction) -> NDArray[np.float64]:
    total = float(design.trials.sum())
    pooled = float(design.successes.sum()) / total
    pooled = min(max(pooled, 0.5 / total), 1.0 - 0.5 / total)
    start = np.zeros(design.n_coef)
    start[0] = float(link.forward(pooled))
    return start


def newton_raphson(design: BinomialDesign, link: LinkFunction, label: str = "model") -> NewtonResult:
    """
    Maximises the binomial log-likelihood with Fisher-scoring steps and step halving.

    Convergence requires the summed score to be within ``SCORE_TOLERANCE`` (raised to the
    rounding floor of the summation for very large data sets) and the Newton step to have
    settled. A step is accepted when the linear predictor stays within ``ETA_BOUND`` and
    the log-likelihood does not decrease; when no halving is acceptable the fit stops
    and is reported as not converged, which is how separation shows up.

    :param design: The binomial regression problem.
    :param link: Link function.
    :param label: Name used in log messages.
    :return: Estimate with convergence flag, iteration count and log-likelihood.
    :raises SingularDesignError: If the design is rank deficient.
    """
    _check_design(design, label)
    coef = _starting_values(design, link)
    loglik = design.loglik(coef, link)

    for iteration in range(MAX_ITERATIONS + 1):
        contributions = design.score_contributions(coef, link)
        score = contributions.sum(axis=0)
        info = design.information(coef, link)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            logger.warning(f"{label}: information matrix became singular at iteration {iteration}")
            return NewtonResult(coef, False, iteration, loglik)

        floor = 64.0 * np.finfo(float).eps * float(np.abs(contributions).sum(axis=0).max(initial=0.0))
        settled = float(np.max(np.abs(step))) <= STEP_TOLERANCE * (1.0 + float(np.max(np.abs(coef))))
        if float(np.max(np.abs(score))) <= max(SCORE_TOLERANCE, floor) and settled:
            logger.debug(f"{label}: converged after {iteration} iterations, loglik={loglik:.10g}")
            return NewtonResult(coef, True, iteration, loglik)
        if iteration == MAX_ITERATIONS:
            break

        accepted = False
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            candidate = coef + scale * step
            if float(np.max(np.abs(design.eta(candidate)))) <= ETA_BOUND:
                candidate_ll = design.loglik(candidate, link)
                if candidate_ll >= loglik - 1e-12 * (1.0 + abs(loglik)):
                    coef, loglik, accepted = candidate, candidate_ll, True
                    break
            scale *= 0.5
        logger.debug(f"{label}: iteration {iteration + 1}, max|score|={np.max(np.abs(score)):.3e}, step scale={scale:g}")
        if not accepted:
            logger.warning(f"{label}: no step halving kept |eta| <= {ETA_BOUND:g} while improving the likelihood (separation)")
            return NewtonResult(coef, False, iteration + 1, loglik)

    logger.warning(f"{label}: not converged after {MAX_ITERATIONS} iterations")
    return NewtonResult(coef, False, MAX_ITERATIONS, loglik)


def fit_treatment_model(data: ClusterData, link: LinkFunction, *, stratum: int = 1, condition_on_s2: bool = False) -> TreatmentModelFit:
    """
    Fits the factual treatment model by maximum likelihood.

    :param data: Cluster records.
    :param link: Link function.
    :param stratum: 1 for the primary stratum, 2 for the second stratum.
    :param condition_on_s2: Condition the stratum 1 model on S2.
    :return: The fitted treatment model.
    :raises SingularDesignError: If the design is rank deficient.
    """
    design = treatment_design(data, stratum=stratum, condition_on_s2=condition_on_s2 and stratum == 1)
    result = newton_raphson(design, link, label=f"treatment model (stratum {stratum})")
    return TreatmentModelFit(
        rho=result.coef,
        link=link,
        converged=result.converged,
        iterations=result.iterations,
        loglik=result.loglik,
        stratum=stratum,
        condition_on_s2=condition_on_s2 and stratum == 1,
    )


def fit_outcome_model(data: ClusterData, outcome_def: OutcomeDefinition, link: LinkFunction, include_s2: bool = False) -> OutcomeModelFit:
    """
    Fits the outcome mean model E(Y | S, L) by maximum likelihood.

    :param data: Cluster records.
    :param outcome_def: Outcome definition; fixes each cluster's denominator.
    :param link: Link function.
    :param include_s2: Adds the second-stratum proportion as a covariate.
    :return: The fitted outcome model.
    :raises EmptyLikelihoodError: If every denominator is zero.
    :raises DataValidationError: If a denominator disagrees with ``outcome_def``.
    :raises SingularDesignError: If the design is rank deficient.
    """
    design = outcome_design(data, outcome_def, include_s2=include_s2)
    if not np.any(design.trials > 0):
        raise EmptyLikelihoodError(f"No cluster contributes to the '{outcome_def.value}' outcome likelihood")
    result = newton_raphson(design, link, label="outcome model")
    return OutcomeModelFit(
        beta=result.coef,
        link=link,
        converged=result.converged,
        iterations=result.iterations,
        loglik=result.loglik,
        include_s2=include_s2,
    )


def treatment_score(fit: TreatmentModelFit, data: ClusterData) -> NDArray[np.float64]:
    return treatment_design(data, fit.stratum, fit.condition_on_s2).score_contributions(fit.rho, fit.link)


def outcome_score(fit: OutcomeModelFit, data: ClusterData, outcome_def: OutcomeDefinition) -> NDArray[np.float64]:
    return outcome_design(data, outcome_def, fit.include_s2).score_contributions(fit.beta, fit.link)


def treatment_hessian(fit: TreatmentModelFit, data: ClusterData) -> NDArray[np.float64]:
    return treatment_design(data, fit.stratum, fit.condition_on_s2).hessian(fit.rho, fit.link)


def outcome_hessian(fit: OutcomeModelFit, data: ClusterData, outcome_def: OutcomeDefinition) -> NDArray[np.float64]:
    return outcome_design(data, outcome_def, fit.include_s2).hessian(fit.beta, fit.link)
