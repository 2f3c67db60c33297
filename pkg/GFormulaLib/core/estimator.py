"""End-to-end g-formula estimation over a grid of policies."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, TypeVar

import numpy as np

from GFormulaLib.core.gformula import estimate_mu, estimate_mu_strata
from GFormulaLib.core.kernel import LinkFunction
from GFormulaLib.core.mle import as_arrays, fit_outcome_model, fit_treatment_model
from GFormulaLib.core.policy import solve_gamma0, solve_strata_policy
from GFormulaLib.core.variance import EquationContext, ThetaStack, delta_block, mu_block, sandwich, wald_interval
from GFormulaLib.models.data_classes import EstimateReport, OutcomeDefinition
from GFormulaLib.models.errors import ConvergenceError, DataValidationError, PolicyStateError
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Sequence

    from loguru import Logger

    from GFormulaLib.core.mle import ClusterData
    from GFormulaLib.models.data_classes import OutcomeModelFit, PolicySpec, SandwichResult, TreatmentModelFit

logger: Logger = get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class FittedModels:
    treatment: TreatmentModelFit
    outcome: OutcomeModelFit
    treatment_s2: TreatmentModelFit | None = None


@dataclass
class GFormulaEstimator:
    """
    Fits both nuisance models, solves every policy, standardises, and attaches sandwich
    standard errors. In the two-strata layout the first-stratum treatment model conditions
    on S2 and the outcome model includes S2.
    """

    alphas: Sequence[float]
    contrasts: Sequence[tuple[float, float]] = ()
    outcome_def: OutcomeDefinition = OutcomeDefinition.OVERALL
    link: LinkFunction = field(default_factory=LinkFunction.logit)
    strata: bool = False
    alphas_strata2: Sequence[float] | None = None
    ordered: bool = False
    check_jacobian: bool = False
    level: float = 0.95
    threads: int = 1

    models: FittedModels | None = field(default=None, init=False)
    policies: list[PolicySpec] = field(default_factory=list, init=False)
    theta: ThetaStack | None = field(default=None, init=False)
    variance: SandwichResult | None = field(default=None, init=False)
    mus: list[float] = field(default_factory=list, init=False)
    deltas: list[float] = field(default_factory=list, init=False)

    def __post_init__(self) -> None:
        self.alphas = tuple(float(a) for a in self.alphas)
        self.contrasts = tuple((float(a), float(b)) for a, b in self.contrasts)
        if self.alphas_strata2 is not None:
            if not self.strata:
                raise DataValidationError("Second-stratum policy targets require the two-strata layout")
            self.alphas_strata2 = tuple(float(a) for a in self.alphas_strata2)
        if self.threads < 1:
            raise DataValidationError(f"threads must be at least 1, got {self.threads}")

    def context(self, n_covariates: int) -> EquationContext:
        return EquationContext(
            treatment_link=self.link,
            outcome_link=self.link,
            outcome_def=self.outcome_def,
            alphas=tuple(self.alphas),
            contrasts=tuple(self.contrasts),
            n_covariates=n_covariates,
            strata=self.strata,
            condition_on_s2=self.strata,
            include_s2=self.strata,
            alphas_strata2=None if self.alphas_strata2 is None else tuple(self.alphas_strata2),
        )

    def fit_models(self, data: ClusterData) -> FittedModels:
        """
        Fits the treatment model(s) and the outcome model.

        :raises ConvergenceError: If any fit fails to converge.
        """
        arrays = as_arrays(data, require_strata=self.strata)
        treatment = fit_treatment_model(arrays, self.link, stratum=1, condition_on_s2=self.strata)
        treatment_s2 = fit_treatment_model(arrays, self.link, stratum=2) if self.strata else None
        outcome = fit_outcome_model(arrays, self.outcome_def, self.link, include_s2=self.strata)
        for label, fit in (("treatment", treatment), ("second-stratum treatment", treatment_s2), ("outcome", outcome)):
            if fit is not None and not fit.converged:
                raise ConvergenceError(f"The {label} model did not converge after {fit.iterations} iterations")
        self.models = FittedModels(treatment=treatment, outcome=outcome, treatment_s2=treatment_s2)
        logger.debug(f"Treatment rho={np.array2string(treatment.rho, precision=6)}, outcome beta={np.array2string(outcome.beta, precision=6)}")
        return self.models

    def _map(self, func: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Applies ``func`` per policy, on ``threads`` threads when above one; results keep input order."""
        if self.threads == 1:
            return [func(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(func, items))

    def solve_policies(self, data: ClusterData) -> list[PolicySpec]:
        arrays = as_arrays(data, require_strata=self.strata)
        models = self.models or self.fit_models(arrays)

        def solve(i: int) -> PolicySpec:
            alpha = self.alphas[i]
            if self.strata:
                assert models.treatment_s2 is not None
                target2 = None if self.alphas_strata2 is None else self.alphas_strata2[i]
                return solve_strata_policy(alpha, models.treatment, models.treatment_s2, arrays, alpha_strata2=target2, ordered=self.ordered)
            return solve_gamma0(alpha, models.treatment.slopes, arrays.covariates, self.link, ordered=self.ordered)

        self.policies = self._map(solve, range(len(self.alphas)))
        return self.policies

    def standardize(self, data: ClusterData) -> list[float]:
        """
        Standardises the fitted outcome model over every solved policy.

        :param data: Cluster records the models were fitted to.
        :return: Policy means in ``alphas`` order; contrasts are kept in ``deltas``.
        :raises PolicyStateError: If the policies have not been solved.
        """
        arrays = as_arrays(data, require_strata=self.strata)
        if self.models is None or len(self.policies) != len(self.alphas):
            raise PolicyStateError("Fit the models and solve every policy before standardising")
        models = self.models

        def standardize_one(policy: PolicySpec) -> float:
            if self.strata:
                assert models.treatment_s2 is not None
                return estimate_mu_strata(policy, models.treatment, models.treatment_s2, models.outcome, arrays, ordered=self.ordered)
            slopes = models.treatment.slopes
            return estimate_mu(policy, models.outcome, slopes, arrays, treatment_link=models.treatment.link, ordered=self.ordered)

        mus = self._map(standardize_one, self.policies)
        mu_by_alpha = dict(zip(self.alphas, mus, strict=True))
        self.mus = mus
        self.deltas = [mu_by_alpha[a] - mu_by_alpha[b] for a, b in self.contrasts]
        return mus

    def compute_variance(self, data: ClusterData) -> SandwichResult:
        """
        Stacks every fitted parameter and evaluates the empirical sandwich at it.

        :raises PolicyStateError: If the estimates have not been computed.
        :raises SingularInformationError: If the bread matrix is singular.
        """
        arrays = as_arrays(data, require_strata=self.strata)
        if self.models is None or len(self.mus) != len(self.alphas):
            raise PolicyStateError("Standardise every policy before computing the variance")
        context = self.context(arrays.n_covariates)
        self.theta = ThetaStack.assemble(
            context,
            rho=self.models.treatment.rho,
            gammas=[p.gamma0 for p in self.policies],
            beta=self.models.outcome.beta,
            mus=self.mus,
            deltas=self.deltas,
            rho_s2=None if self.models.treatment_s2 is None else self.models.treatment_s2.rho,
            gammas_s2=[p.gamma0_strata2 for p in self.policies] if self.strata else None,
        )
        self.variance = sandwich(arrays, self.theta, context, check_jacobian=self.check_jacobian)
        return self.variance

    def report(self) -> EstimateReport:
        if self.theta is None or self.variance is None:
            raise PolicyStateError("No variance has been computed yet")
        se_mu = [float(self.variance.se[self.theta.block_index[mu_block(a)]][0]) for a in self.alphas]
        # a policy contrasted with itself is identically zero
        se_delta = [0.0 if a == b else float(self.variance.block_se(delta_block(a, b))[0]) for a, b in self.contrasts]
        mu_ci = [wald_interval(mu, se, self.level) for mu, se in zip(self.mus, se_mu, strict=True)]
        delta_ci = [wald_interval(d, se, self.level) for d, se in zip(self.deltas, se_delta, strict=True)]

        return EstimateReport(
            alpha_grid=tuple(self.alphas),
            gamma0=tuple(p.gamma0 for p in self.policies),
            mu_hat=tuple(self.mus),
            se_mu=tuple(se_mu),
            mu_ci_lower=tuple(lo for lo, _ in mu_ci),
            mu_ci_upper=tuple(hi for _, hi in mu_ci),
            contrasts=tuple(self.contrasts),
            delta_hat=tuple(self.deltas),
            se_delta=tuple(se_delta),
            delta_ci_lower=tuple(lo for lo, _ in delta_ci),
            delta_ci_upper=tuple(hi for _, hi in delta_ci),
            outcome_def=self.outcome_def,
            strata=self.strata,
            condition_number=self.variance.condition_number,
        )

    def estimate(self, data: ClusterData) -> EstimateReport:
        """
        Runs fit, solve, standardise and sandwich for every configured policy and contrast.

        :param data: Cluster records.
        :return: Point estimates, standard errors and Wald intervals.
        :raises ConvergenceError: If a model fit fails.
        :raises UnsolvablePolicyError: If a policy cannot be solved.
        :raises SingularInformationError: If the sandwich bread is singular.
        """
        arrays = as_arrays(data, require_strata=self.strata)
        self.fit_models(arrays)
        self.solve_policies(arrays)
        self.standardize(arrays)
        self.compute_variance(arrays)
        return self.report()
