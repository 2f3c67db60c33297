"""Stacked estimating equations and the empirical sandwich variance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy import linalg, special

from GFormulaLib.core.gformula import StandardizedTerms, StrataTerms, standardized_terms, strata_terms
from GFormulaLib.core.kernel import LinkFunction
from GFormulaLib.core.mle import as_arrays, outcome_design, treatment_design
from GFormulaLib.core.policy import strata_policy_terms
from GFormulaLib.models.data_classes import ClusterRecord, OutcomeDefinition, OutcomeModelFit, SandwichResult, TreatmentModelFit
from GFormulaLib.models.errors import DataValidationError, SingularInformationError
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from loguru import Logger
    from numpy.typing import ArrayLike, NDArray

    from GFormulaLib.core.mle import ClusterData
    from GFormulaLib.models.data_classes import ClusterArrays

logger: Logger = get_logger(__name__)

Z_975 = 1.959963984540054
CONDITION_LIMIT = 1e12
JACOBIAN_RTOL = 1e-5
FD_RELATIVE_STEP = 1e-6


def _label(value: float) -> str:
    # shortest round-trip form, so distinct alphas never share a block
    return repr(float(value))


def mu_block(alpha: float) -> str:
    return f"mu[{_label(alpha)}]"


def delta_block(alpha: float, alpha_prime: float) -> str:
    return f"delta[{_label(alpha)},{_label(alpha_prime)}]"


def gamma_block(alpha: float, stratum: int | None = None) -> str:
    prefix = "gamma" if stratum is None else f"gamma_s{stratum}"
    return f"{prefix}[{_label(alpha)}]"


@dataclass(frozen=True)
class EquationContext:
    """Everything besides theta that fixes the estimating equations and the block layout."""

    treatment_link: LinkFunction
    outcome_link: LinkFunction
    outcome_def: OutcomeDefinition
    alphas: tuple[float, ...]
    contrasts: tuple[tuple[float, float], ...] = ()
    n_covariates: int = 1
    strata: bool = False
    condition_on_s2: bool = False
    include_s2: bool = False
    alphas_strata2: tuple[float, ...] | None = None
    second_link: LinkFunction | None = None

    def __post_init__(self) -> None:
        if not self.alphas:
            raise DataValidationError("At least one policy alpha is required")
        if len(set(self.alphas)) != len(self.alphas):
            raise DataValidationError(f"Duplicate policy alphas: {self.alphas}")
        for a, b in self.contrasts:
            if a not in self.alphas or b not in self.alphas:
                raise DataValidationError(f"Contrast ({a}, {b}) refers to a policy outside {self.alphas}")
        if self.alphas_strata2 is not None and len(self.alphas_strata2) != len(self.alphas):
            raise DataValidationError("alphas_strata2 must give one second-stratum target per alpha")
        if not self.strata and (self.condition_on_s2 or self.include_s2):
            raise DataValidationError("S2 terms require the two-strata layout")

    @property
    def stratum2_link(self) -> LinkFunction:
        return self.second_link or self.treatment_link

    def strata2_target(self, index: int) -> float:
        return self.alphas[index] if self.alphas_strata2 is None else self.alphas_strata2[index]

    def block_index(self) -> dict[str, slice]:
        q = self.n_covariates
        sizes: list[tuple[str, int]] = []
        if self.strata:
            sizes += [("rho_s1", 1 + q + int(self.condition_on_s2)), ("rho_s2", 1 + q)]
            for alpha in self.alphas:
                sizes += [(gamma_block(alpha, 1), 1), (gamma_block(alpha, 2), 1)]
            sizes.append(("beta", 2 + q + int(self.include_s2)))
        else:
            sizes.append(("rho", 1 + q))
            sizes += [(gamma_block(alpha), 1) for alpha in self.alphas]
            sizes.append(("beta", 2 + q))
        sizes += [(mu_block(alpha), 1) for alpha in self.alphas]
        sizes += [(delta_block(a, b), 1) for a, b in self.contrasts]

        index: dict[str, slice] = {}
        start = 0
        for name, size in sizes:
            index[name] = slice(start, start + size)
            start += size
        return index

    @property
    def dimension(self) -> int:
        return max(s.stop for s in self.block_index().values())


@dataclass(frozen=True)
class ThetaStack:
    """The stacked parameter vector with named blocks."""

    values: NDArray[np.float64]
    block_index: dict[str, slice]

    def __getitem__(self, name: str) -> NDArray[np.float64]:
        return self.values[self.block_index[name]]

    def scalar(self, name: str) -> float:
        return float(self.values[self.block_index[name]][0])

    def with_values(self, values: NDArray[np.float64]) -> ThetaStack:
        return ThetaStack(values=values, block_index=self.block_index)

    def block_of(self, position: int) -> str:
        for name, block in self.block_index.items():
            if block.start <= position < block.stop:
                return name
        raise IndexError(position)

    @classmethod
    def assemble(
        cls,
        context: EquationContext,
        rho: ArrayLike,
        gammas: ArrayLike,
        beta: ArrayLike,
        mus: ArrayLike,
        deltas: ArrayLike = (),
        rho_s2: ArrayLike | None = None,
        gammas_s2: ArrayLike | None = None,
    ) -> ThetaStack:
        """
        Builds theta from fitted pieces, in the order of ``context.alphas`` and ``context.contrasts``.

        :raises DataValidationError: If a piece has the wrong length.
        """
        index = context.block_index()
        values = np.full(context.dimension, np.nan)
        gammas_arr = np.asarray(gammas, dtype=float).ravel()
        mus_arr = np.asarray(mus, dtype=float).ravel()
        deltas_arr = np.asarray(deltas, dtype=float).ravel()
        if gammas_arr.size != len(context.alphas) or mus_arr.size != len(context.alphas) or deltas_arr.size != len(context.contrasts):
            raise DataValidationError("Policy intercepts, means and contrasts must match the context layout")

        def put(name: str, piece: ArrayLike) -> None:
            arr = np.asarray(piece, dtype=float).ravel()
            block = index[name]
            if arr.size != block.stop - block.start:
                raise DataValidationError(f"Block '{name}' expects {block.stop - block.start} values, got {arr.size}")
            values[block] = arr

        put("rho_s1" if context.strata else "rho", rho)
        put("beta", beta)
        if context.strata:
            if rho_s2 is None or gammas_s2 is None:
                raise DataValidationError("Two-strata layout needs rho_s2 and gammas_s2")
            put("rho_s2", rho_s2)
            gammas_s2_arr = np.asarray(gammas_s2, dtype=float).ravel()
            for i, alpha in enumerate(context.alphas):
                put(gamma_block(alpha, 1), gammas_arr[i])
                put(gamma_block(alpha, 2), gammas_s2_arr[i])
        else:
            for i, alpha in enumerate(context.alphas):
                put(gamma_block(alpha), gammas_arr[i])
        for i, alpha in enumerate(context.alphas):
            put(mu_block(alpha), mus_arr[i])
        for i, (a, b) in enumerate(context.contrasts):
            put(delta_block(a, b), deltas_arr[i])
        return cls(values=values, block_index=index)


def _treatment_fit(rho: NDArray[np.float64], link: LinkFunction, stratum: int = 1, condition_on_s2: bool = False) -> TreatmentModelFit:
    return TreatmentModelFit(rho=rho, link=link, converged=True, iterations=0, loglik=math.nan, stratum=stratum, condition_on_s2=condition_on_s2)


def _outcome_fit(beta: NDArray[np.float64], link: LinkFunction, include_s2: bool = False) -> OutcomeModelFit:
    return OutcomeModelFit(beta=beta, link=link, converged=True, iterations=0, loglik=math.nan, include_s2=include_s2)


def _coerce_theta(theta: ThetaStack | ArrayLike, context: EquationContext) -> ThetaStack:
    if isinstance(theta, ThetaStack):
        return theta
    values = np.asarray(theta, dtype=float).ravel()
    if values.size != context.dimension:
        raise DataValidationError(f"theta has {values.size} entries, the layout needs {context.dimension}")
    return ThetaStack(values=values, block_index=context.block_index())


def _policy_value_columns(arrays: ClusterArrays, theta: ThetaStack, context: EquationContext) -> dict[float, StandardizedTerms | StrataTerms]:
    """Standardisation terms per alpha, evaluated at theta."""
    beta = _outcome_fit(theta["beta"], context.outcome_link, context.include_s2)
    terms: dict[float, StandardizedTerms | StrataTerms] = {}
    if context.strata:
        fit_s1 = _treatment_fit(theta["rho_s1"], context.treatment_link, 1, context.condition_on_s2)
        fit_s2 = _treatment_fit(theta["rho_s2"], context.stratum2_link, 2)
        for alpha in context.alphas:
            terms[alpha] = strata_terms(theta.scalar(gamma_block(alpha, 1)), theta.scalar(gamma_block(alpha, 2)), fit_s1, fit_s2, beta, arrays)
    else:
        slopes = theta["rho"][1:]
        for alpha in context.alphas:
            terms[alpha] = standardized_terms(theta.scalar(gamma_block(alpha)), slopes, context.treatment_link, beta, arrays)
    return terms


def psi_matrix(data: ClusterData, theta: ThetaStack | ArrayLike, context: EquationContext) -> NDArray[np.float64]:
    """
    Per-cluster estimating functions, one row per cluster and one column per theta entry.

    Blocks: treatment and outcome scores; g^-1(gamma + rho_1 L) - alpha for each policy;
    standardised mean minus mu for each policy; difference of two standardised means minus
    delta for each contrast.
    """
    arrays = as_arrays(data, require_strata=context.strata)
    theta = _coerce_theta(theta, context)
    psi = np.empty((arrays.m, context.dimension))
    idx = theta.block_index

    psi[:, idx["beta"]] = outcome_design(arrays, context.outcome_def, context.include_s2).score_contributions(theta["beta"], context.outcome_link)
    if context.strata:
        psi[:, idx["rho_s1"]] = treatment_design(arrays, 1, context.condition_on_s2).score_contributions(theta["rho_s1"], context.treatment_link)
        psi[:, idx["rho_s2"]] = treatment_design(arrays, 2).score_contributions(theta["rho_s2"], context.stratum2_link)
        fit_s1 = _treatment_fit(theta["rho_s1"], context.treatment_link, 1, context.condition_on_s2)
        fit_s2 = _treatment_fit(theta["rho_s2"], context.stratum2_link, 2)
        for i, alpha in enumerate(context.alphas):
            gamma1, gamma2 = theta.scalar(gamma_block(alpha, 1)), theta.scalar(gamma_block(alpha, 2))
            eta2 = gamma2 + arrays.covariates @ fit_s2.slopes
            psi[:, idx[gamma_block(alpha, 2)].start] = context.stratum2_link.inverse(eta2) - context.strata2_target(i)
            policy_terms = strata_policy_terms(gamma1, gamma2, fit_s1, fit_s2, arrays)
            psi[:, idx[gamma_block(alpha, 1)].start] = policy_terms.values - alpha
    else:
        psi[:, idx["rho"]] = treatment_design(arrays, 1).score_contributions(theta["rho"], context.treatment_link)
        offsets = arrays.covariates @ theta["rho"][1:]
        for alpha in context.alphas:
            psi[:, idx[gamma_block(alpha)].start] = context.treatment_link.inverse(theta.scalar(gamma_block(alpha)) + offsets) - alpha

    terms = _policy_value_columns(arrays, theta, context)
    for alpha in context.alphas:
        psi[:, idx[mu_block(alpha)].start] = terms[alpha].values - theta.scalar(mu_block(alpha))
    for a, b in context.contrasts:
        diff = terms[a].values - terms[b].values
        psi[:, idx[delta_block(a, b)].start] = diff - theta.scalar(delta_block(a, b))
    return psi


def psi_eval(record: ClusterRecord, theta: ThetaStack | ArrayLike, context: EquationContext) -> NDArray[np.float64]:
    """Estimating function of a single cluster."""
    return psi_matrix([record], theta, context)[0]


def _value_jacobian_row(
    row: NDArray[np.float64],
    terms: StandardizedTerms | StrataTerms,
    theta: ThetaStack,
    context: EquationContext,
    alpha: float,
    covariates: NDArray[np.float64],
    sign: float,
) -> None:
    """Adds sign * d(sum_i v_i(alpha)) / d theta into ``row``."""
    idx = theta.block_index
    q = context.n_covariates
    if isinstance(terms, StrataTerms):
        rho1 = idx["rho_s1"]
        row[rho1.start + 1 : rho1.start + 1 + q] += sign * (terms.d_gamma1 @ covariates)
        if context.condition_on_s2:
            row[rho1.start + 1 + q] += sign * terms.d_rho1_s2.sum()
        rho2 = idx["rho_s2"]
        row[rho2.start + 1 : rho2.stop] += sign * (terms.d_gamma2 @ covariates)
        row[idx[gamma_block(alpha, 1)].start] += sign * terms.d_gamma1.sum()
        row[idx[gamma_block(alpha, 2)].start] += sign * terms.d_gamma2.sum()
    else:
        rho = idx["rho"]
        row[rho.start + 1 : rho.stop] += sign * (terms.d_eta @ covariates)
        row[idx[gamma_block(alpha)].start] += sign * terms.d_eta.sum()
    row[idx["beta"]] += sign * terms.d_beta.sum(axis=0)


def analytic_jacobian(data: ClusterData, theta: ThetaStack | ArrayLike, context: EquationContext) -> NDArray[np.float64]:
    """Summed derivative of the estimating functions, d sum_i psi_i / d theta (P x P)."""
    arrays = as_arrays(data, require_strata=context.strata)
    theta = _coerce_theta(theta, context)
    idx = theta.block_index
    P = context.dimension
    m = arrays.m
    L = arrays.covariates
    jac = np.zeros((P, P))

    beta = idx["beta"]
    jac[beta, beta] = outcome_design(arrays, context.outcome_def, context.include_s2).hessian(theta["beta"], context.outcome_link)

    if context.strata:
        rho1, rho2 = idx["rho_s1"], idx["rho_s2"]
        jac[rho1, rho1] = treatment_design(arrays, 1, context.condition_on_s2).hessian(theta["rho_s1"], context.treatment_link)
        jac[rho2, rho2] = treatment_design(arrays, 2).hessian(theta["rho_s2"], context.stratum2_link)
        fit_s1 = _treatment_fit(theta["rho_s1"], context.treatment_link, 1, context.condition_on_s2)
        fit_s2 = _treatment_fit(theta["rho_s2"], context.stratum2_link, 2)
        q = context.n_covariates
        for alpha in context.alphas:
            g1, g2 = idx[gamma_block(alpha, 1)].start, idx[gamma_block(alpha, 2)].start
            gamma1, gamma2 = theta.scalar(gamma_block(alpha, 1)), theta.scalar(gamma_block(alpha, 2))
            density2 = context.stratum2_link.density(gamma2 + L @ fit_s2.slopes)
            jac[g2, rho2.start + 1 : rho2.stop] = density2 @ L
            jac[g2, g2] = density2.sum()

            pt = strata_policy_terms(gamma1, gamma2, fit_s1, fit_s2, arrays)
            jac[g1, rho1.start + 1 : rho1.start + 1 + q] = pt.d_gamma1 @ L
            if context.condition_on_s2:
                jac[g1, rho1.start + 1 + q] = pt.d_rho1_s2.sum()
            jac[g1, rho2.start + 1 : rho2.stop] = pt.d_gamma2 @ L
            jac[g1, g1] = pt.d_gamma1.sum()
            jac[g1, g2] = pt.d_gamma2.sum()
    else:
        rho = idx["rho"]
        jac[rho, rho] = treatment_design(arrays, 1).hessian(theta["rho"], context.treatment_link)
        offsets = L @ theta["rho"][1:]
        for alpha in context.alphas:
            g = idx[gamma_block(alpha)].start
            density = context.treatment_link.density(theta.scalar(gamma_block(alpha)) + offsets)
            jac[g, rho.start + 1 : rho.stop] = density @ L
            jac[g, g] = density.sum()

    terms = _policy_value_columns(arrays, theta, context)
    for alpha in context.alphas:
        row = idx[mu_block(alpha)].start
        _value_jacobian_row(jac[row], terms[alpha], theta, context, alpha, L, 1.0)
        jac[row, row] = -m
    for a, b in context.contrasts:
        row = idx[delta_block(a, b)].start
        _value_jacobian_row(jac[row], terms[a], theta, context, a, L, 1.0)
        _value_jacobian_row(jac[row], terms[b], theta, context, b, L, -1.0)
        jac[row, row] = -m
    return jac


def numerical_jacobian(data: ClusterData, theta: ThetaStack | ArrayLike, context: EquationContext) -> NDArray[np.float64]:
    """Central finite differences of the summed estimating functions, step 1e-6 * max(1, |theta_k|)."""
    arrays = as_arrays(data, require_strata=context.strata)
    theta = _coerce_theta(theta, context)
    P = context.dimension
    jac = np.empty((P, P))
    for k in range(P):
        h = FD_RELATIVE_STEP * max(1.0, abs(float(theta.values[k])))
        up, down = theta.values.copy(), theta.values.copy()
        up[k] += h
        down[k] -= h
        plus = psi_matrix(arrays, theta.with_values(up), context).sum(axis=0)
        minus = psi_matrix(arrays, theta.with_values(down), context).sum(axis=0)
        jac[:, k] = (plus - minus) / (2.0 * h)
    return jac


def empirical_sandwich(
    psi: NDArray[np.float64],
    jacobian_sum: NDArray[np.float64],
    block_index: dict[str, slice] | None = None,
) -> SandwichResult:
    """
    Computes Sigma = U^-1 W U^-T with U = -J/m and W the mean outer product of psi.

    :param psi: Per-cluster estimating functions at the estimate, shape (m, P).
    :param jacobian_sum: Summed Jacobian of the estimating functions, shape (P, P).
    :param block_index: Names of the theta blocks, used to report the offending block.
    :return: U, W, sigma = Sigma / m, standard errors and the condition number of U.
    :raises SingularInformationError: If U is numerically singular.
    """
    m, P = psi.shape
    if jacobian_sum.shape != (P, P):
        raise DataValidationError(f"Jacobian shape {jacobian_sum.shape} does not match {P} estimating functions")
    block_index = block_index or {"theta": slice(0, P)}
    bread = -jacobian_sum / m
    meat = psi.T @ psi / m

    left, singular, right_t = linalg.svd(bread)
    condition = float(singular[0] / singular[-1]) if singular[-1] > 0.0 else math.inf
    if not math.isfinite(condition) or condition > CONDITION_LIMIT:
        position = int(np.argmax(np.abs(right_t[-1])))
        block = next((name for name, s in block_index.items() if s.start <= position < s.stop), None)
        raise SingularInformationError(f"Sandwich bread is singular (condition number {condition:.3e})", block=block, condition_number=condition)

    bread_inv = (right_t.T / singular) @ left.T
    sigma = bread_inv @ meat @ bread_inv.T / m
    sigma = 0.5 * (sigma + sigma.T)
    se = np.sqrt(np.clip(np.diag(sigma), 0.0, None))
    return SandwichResult(U=bread, W=meat, sigma=sigma, se=se, block_index=block_index, condition_number=condition)


def sandwich(data: ClusterData, theta_hat: ThetaStack | ArrayLike, context: EquationContext, check_jacobian: bool = False) -> SandwichResult:
    """
    Empirical sandwich variance of the stacked estimator at ``theta_hat``.

    :param data: Cluster records the estimate was computed from.
    :param theta_hat: The stacked estimate.
    :param context: Equation layout.
    :param check_jacobian: Also compute the finite-difference Jacobian and record the
        largest row-scaled discrepancy (a warning is logged above 1e-5).
    :return: The sandwich result.
    :raises SingularInformationError: If the bread matrix is singular.
    """
    arrays = as_arrays(data, require_strata=context.strata)
    theta_hat = _coerce_theta(theta_hat, context)
    psi = psi_matrix(arrays, theta_hat, context)
    jac = analytic_jacobian(arrays, theta_hat, context)
    result = empirical_sandwich(psi, jac, theta_hat.block_index)

    if check_jacobian:
        numeric = numerical_jacobian(arrays, theta_hat, context)
        scale = np.maximum(1.0, np.abs(jac).max(axis=1, keepdims=True))
        discrepancy = float(np.max(np.abs(jac - numeric) / scale))
        if discrepancy > JACOBIAN_RTOL:
            logger.warning(f"Analytic and finite-difference Jacobians differ by {discrepancy:.3e}")
        else:
            logger.debug(f"Jacobian cross-check discrepancy {discrepancy:.3e}")
        result = SandwichResult(
            U=result.U,
            W=result.W,
            sigma=result.sigma,
            se=result.se,
            block_index=result.block_index,
            condition_number=result.condition_number,
            jacobian_discrepancy=discrepancy,
        )
    logger.debug(f"Sandwich condition number {result.condition_number:.3e}")
    return result


def wald_interval(estimate: float, se: float, level: float = 0.95) -> tuple[float, float]:
    """
    Symmetric Wald interval estimate +/- z se.

    :raises DataValidationError: If ``level`` is outside (0, 1) or ``se`` is negative.
    """
    if not 0.0 < level < 1.0:
        raise DataValidationError(f"Confidence level must be in (0, 1), got {level}")
    if se < 0.0:
        raise DataValidationError(f"Standard error must be non-negative, got {se}")
    z = Z_975 if level == 0.95 else float(special.ndtri(0.5 + 0.5 * level))
    return estimate - z * se, estimate + z * se
