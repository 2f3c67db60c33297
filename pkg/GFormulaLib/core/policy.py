"""Counterfactual policy intercepts: find gamma so the mean treatment probability equals alpha."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from GFormulaLib.core.kernel import binomial_pmf_row
from GFormulaLib.core.mle import as_arrays
from GFormulaLib.models.data_classes import PolicySpec
from GFormulaLib.models.errors import DataValidationError, PolicyStateError, UnsolvablePolicyError
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from loguru import Logger
    from numpy.typing import ArrayLike, NDArray

    from GFormulaLib.core.kernel import LinkFunction
    from GFormulaLib.core.mle import ClusterData
    from GFormulaLib.models.data_classes import TreatmentModelFit

logger: Logger = get_logger(__name__)

INITIAL_HALF_WIDTH = 20.0
GAMMA_LIMIT = 50.0
RESIDUAL_TOLERANCE = 1e-10
X_TOLERANCE = 1e-14
MAX_ITERATIONS = 200


@dataclass(frozen=True)
class InterceptSolution:
    gamma: float
    residual: float
    iterations: int


def _validate_alpha(alpha: float) -> None:
    if not (math.isfinite(alpha) and 0.0 < alpha < 1.0):
        raise DataValidationError(f"Policy alpha must lie strictly inside (0, 1), got {alpha}")


class _MixtureMean:
    """f(gamma) = weighted mean of g^-1(gamma + offset) - alpha, with its derivative."""

    def __init__(self, alpha: float, offsets: NDArray[np.float64], weights: NDArray[np.float64], link: LinkFunction, ordered: bool) -> None:
        self.alpha = alpha
        self.offsets = offsets
        self.weights = weights
        self.link = link
        self.ordered = ordered
        self.total = math.fsum(weights) if ordered else float(weights.sum())

    def _mean(self, values: NDArray[np.float64]) -> float:
        if self.ordered:
            return math.fsum(self.weights * values) / self.total
        return float(np.dot(self.weights, values)) / self.total

    def __call__(self, gamma: float) -> tuple[float, float]:
        eta = gamma + self.offsets
        return self._mean(self.link.inverse(eta)) - self.alpha, self._mean(self.link.density(eta))


def _bracket(func: _MixtureMean, center: float) -> tuple[float, float]:
    half_width = INITIAL_HALF_WIDTH
    lo, hi = center - half_width, center + half_width
    while True:
        f_lo, _ = func(lo)
        f_hi, _ = func(hi)
        if f_lo <= 0.0 <= f_hi:
            return lo, hi
        if abs(lo) >= GAMMA_LIMIT and abs(hi) >= GAMMA_LIMIT:
            break
        at_limit = (f_lo > 0.0 and lo <= -GAMMA_LIMIT) or (f_hi < 0.0 and hi >= GAMMA_LIMIT)
        if at_limit:
            break
        half_width *= 2.0
        logger.debug(f"Expanding policy bracket to half-width {half_width:g} (f(lo)={f_lo:.3e}, f(hi)={f_hi:.3e})")
        if f_lo > 0.0:
            lo = max(center - half_width, -GAMMA_LIMIT)
        if f_hi < 0.0:
            hi = min(center + half_width, GAMMA_LIMIT)
    raise UnsolvablePolicyError(
        f"No intercept in [{-GAMMA_LIMIT:g}, {GAMMA_LIMIT:g}] gives mean treatment probability {func.alpha}"
    )


def _newton_bisection(func: _MixtureMean, lo: float, hi: float) -> tuple[float, int]:
    """Safeguarded Newton on an increasing function bracketed by f(lo) <= 0 <= f(hi)."""
    x = 0.5 * (lo + hi)
    dx_old = hi - lo
    dx = dx_old
    f, df = func(x)
    for iteration in range(1, MAX_ITERATIONS + 1):
        newton_leaves = ((x - hi) * df - f) * ((x - lo) * df - f) >= 0.0
        too_slow = abs(2.0 * f) > abs(dx_old * df)
        if newton_leaves or too_slow or df <= 0.0:
            dx_old = dx
            dx = 0.5 * (hi - lo)
            x = lo + dx
        else:
            dx_old = dx
            dx = f / df
            x -= dx
        if abs(dx) <= X_TOLERANCE * (1.0 + abs(x)):
            return x, iteration
        f, df = func(x)
        if f == 0.0:
            return x, iteration
        if f < 0.0:
            lo = x
        else:
            hi = x
    return x, MAX_ITERATIONS


def solve_intercept(
    alpha: float,
    offsets: ArrayLike,
    weights: ArrayLike | None,
    link: LinkFunction,
    ordered: bool = False,
) -> InterceptSolution:
    """
    Solves sum_j w_j g^-1(gamma + offset_j) / sum_j w_j = alpha for gamma.

    The function is strictly increasing in gamma, so a bracket around g(alpha) is grown
    geometrically until it changes sign and then refined with a Newton step whenever it
    stays inside the bracket, bisecting otherwise.

    :param alpha: Target mean in (0, 1).
    :param offsets: Linear predictor offsets, one per mixture component.
    :param weights: Non-negative mixture weights; ``None`` means equal weights.
    :param link: Link function.
    :param ordered: Use exactly rounded summation (order independent results).
    :return: The intercept, the residual of the equation and the iteration count.
    :raises DataValidationError: If alpha is outside (0, 1) or the weights are invalid.
    :raises UnsolvablePolicyError: If no root exists with |gamma| <= 50 or the residual stays above 1e-10.
    """
    _validate_alpha(alpha)
    offsets_arr = np.asarray(offsets, dtype=float).ravel()
    if offsets_arr.size == 0:
        raise DataValidationError("Cannot solve a policy over an empty set of clusters")
    weights_arr = np.ones_like(offsets_arr) if weights is None else np.asarray(weights, dtype=float).ravel()
    if weights_arr.shape != offsets_arr.shape:
        raise DataValidationError(f"Expected {offsets_arr.size} weights, got {weights_arr.size}")
    if np.any(weights_arr < 0.0) or not np.any(weights_arr > 0.0) or not np.all(np.isfinite(weights_arr)):
        raise DataValidationError("Policy weights must be finite, non-negative and not all zero")
    if not np.all(np.isfinite(offsets_arr)):
        raise DataValidationError("Policy offsets must be finite")

    func = _MixtureMean(alpha, offsets_arr, weights_arr, link, ordered)
    lo, hi = _bracket(func, float(link.forward(alpha)))
    gamma, iterations = _newton_bisection(func, lo, hi)
    residual, _ = func(gamma)
    if abs(residual) > RESIDUAL_TOLERANCE:
        raise UnsolvablePolicyError(f"Policy alpha={alpha}: residual {residual:.3e} above {RESIDUAL_TOLERANCE:g} after {iterations} iterations")
    logger.debug(f"alpha={alpha}: gamma={gamma:.15g} after {iterations} iterations (residual {residual:.2e})")
    return InterceptSolution(gamma=gamma, residual=residual, iterations=iterations)


def solve_gamma0(
    alpha: float,
    rho_slopes: ArrayLike,
    covariates: ArrayLike,
    link: LinkFunction,
    weights: ArrayLike | None = None,
    ordered: bool = False,
) -> PolicySpec:
    """
    Finds the policy intercept gamma so that the average of g^-1(gamma + rho_1 L_i) over the
    observed clusters equals alpha, keeping the fitted covariate effects.

    :param alpha: Policy treatment probability in (0, 1).
    :param rho_slopes: Fitted covariate coefficients of the treatment model.
    :param covariates: Cluster covariate matrix (m x q).
    :param link: Link function of the treatment model.
    :param weights: Optional per-cluster weights (default 1).
    :param ordered: Exactly rounded summation.
    :return: The solved policy.
    """
    slopes = np.asarray(rho_slopes, dtype=float).ravel()
    cov = np.asarray(covariates, dtype=float)
    if cov.ndim == 1:
        cov = cov[:, None]
    if cov.shape[1] != slopes.size:
        raise DataValidationError(f"Covariate dimension {cov.shape[1]} does not match {slopes.size} treatment slopes")
    solution = solve_intercept(alpha, cov @ slopes, weights, link, ordered=ordered)
    return PolicySpec(alpha=alpha, gamma0=solution.gamma, residual=solution.residual)


def second_stratum_probabilities(gamma2: float, fit_s2: TreatmentModelFit, covariates: NDArray[np.float64]) -> NDArray[np.float64]:
    return fit_s2.link.inverse(gamma2 + covariates @ fit_s2.slopes)


def strata_mixture(
    fit_s1: TreatmentModelFit,
    p2: NDArray[np.float64],
    covariates: NDArray[np.float64],
    n2: NDArray[np.int64],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Flattens the counterfactual S2 lattice into (offset, weight) pairs for the stratum 1 solver.

    Each cluster contributes n2 + 1 components, offset L rho_1 + rho_S2 j / n2 with weight
    pmf(n2, j, p2), so every cluster carries total weight one.
    """
    base = covariates @ fit_s1.slopes
    offsets: list[NDArray[np.float64]] = []
    weights: list[NDArray[np.float64]] = []
    for size in np.unique(n2):
        rows = np.flatnonzero(n2 == size)
        pmf = binomial_pmf_row(int(size), p2[rows])
        lattice = np.arange(size + 1, dtype=float) / size
        offsets.append((base[rows, None] + fit_s1.s2_coef * lattice[None, :]).ravel())
        weights.append(pmf.ravel())
    return np.concatenate(offsets), np.concatenate(weights)


def solve_strata_policy(
    alpha: float,
    fit_s1: TreatmentModelFit,
    fit_s2: TreatmentModelFit,
    data: ClusterData,
    alpha_strata2: float | None = None,
    ordered: bool = False,
) -> PolicySpec:
    """
    Solves the two-strata policy: first the second stratum (E(S2) = alpha_strata2, default
    alpha), then the first stratum against the resulting counterfactual distribution of S2.

    :raises PolicyStateError: If the fits are not a stratum 1 / stratum 2 pair.
    :raises SchemaError: If the data lack s2/n2.
    """
    if fit_s1.stratum != 1 or fit_s2.stratum != 2:
        raise PolicyStateError(f"Expected stratum 1 and stratum 2 treatment fits, got strata {fit_s1.stratum} and {fit_s2.stratum}")
    arrays = as_arrays(data, require_strata=True)
    assert arrays.n2 is not None
    alpha2 = alpha if alpha_strata2 is None else alpha_strata2

    stratum2 = solve_intercept(alpha2, arrays.covariates @ fit_s2.slopes, None, fit_s2.link, ordered=ordered)
    p2 = second_stratum_probabilities(stratum2.gamma, fit_s2, arrays.covariates)
    offsets, weights = strata_mixture(fit_s1, p2, arrays.covariates, arrays.n2)
    stratum1 = solve_intercept(alpha, offsets, weights, fit_s1.link, ordered=ordered)
    return PolicySpec(
        alpha=alpha,
        gamma0=stratum1.gamma,
        residual=stratum1.residual,
        gamma0_strata2=stratum2.gamma,
        alpha_strata2=alpha2,
    )


@dataclass(frozen=True)
class StrataPolicyTerms:
    """Per-cluster E_alpha(S1 | L) under the counterfactual S2 law, with derivatives."""

    values: NDArray[np.float64]
    d_gamma1: NDArray[np.float64]
    d_rho1_s2: NDArray[np.float64]
    d_gamma2: NDArray[np.float64]


def strata_policy_terms(gamma1: float, gamma2: float, fit_s1: TreatmentModelFit, fit_s2: TreatmentModelFit, data: ClusterData) -> StrataPolicyTerms:
    arrays = as_arrays(data, require_strata=True)
    assert arrays.n2 is not None
    eta2 = gamma2 + arrays.covariates @ fit_s2.slopes
    p2 = fit_s2.link.inverse(eta2)
    base1 = gamma1 + arrays.covariates @ fit_s1.slopes

    values = np.empty(arrays.m)
    d_gamma1 = np.empty(arrays.m)
    d_rho1_s2 = np.empty(arrays.m)
    d_p2 = np.empty(arrays.m)
    for size in np.unique(arrays.n2):
        n2 = int(size)
        rows = np.flatnonzero(arrays.n2 == size)
        share2 = np.arange(n2 + 1, dtype=float) / n2
        eta1 = base1[rows, None] + fit_s1.s2_coef * share2[None, :]
        treated = fit_s1.link.inverse(eta1)
        density = fit_s1.link.density(eta1)
        pmf2 = binomial_pmf_row(n2, p2[rows])
        values[rows] = np.sum(pmf2 * treated, axis=1)
        d_gamma1[rows] = np.sum(pmf2 * density, axis=1)
        d_rho1_s2[rows] = (pmf2 * density) @ share2
        d_p2[rows] = n2 * np.sum(binomial_pmf_row(n2 - 1, p2[rows]) * np.diff(treated, axis=1), axis=1)
    return StrataPolicyTerms(values=values, d_gamma1=d_gamma1, d_rho1_s2=d_rho1_s2, d_gamma2=fit_s2.link.density(eta2) * d_p2)
