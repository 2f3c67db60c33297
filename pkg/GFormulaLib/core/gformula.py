"""Standardisation of the fitted outcome surface over counterfactual treatment distributions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from GFormulaLib.core.kernel import binomial_pmf_row, mass_window
from GFormulaLib.core.mle import as_arrays
from GFormulaLib.models.errors import PolicyStateError
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from loguru import Logger
    from numpy.typing import ArrayLike, NDArray

    from GFormulaLib.core.kernel import LinkFunction
    from GFormulaLib.core.mle import ClusterData
    from GFormulaLib.models.data_classes import ClusterArrays, OutcomeModelFit, PolicySpec, TreatmentModelFit

logger: Logger = get_logger(__name__)

LATTICE_GUARD = 1_000_000
LATTICE_TAIL = 1e-12


@dataclass(frozen=True)
class StandardizedTerms:
    """
    Per-cluster standardised means and their derivatives.

    ``d_eta`` is the derivative of each value with respect to the treatment linear predictor
    gamma + L rho_1 (so also with respect to gamma); ``d_beta`` holds the derivatives with
    respect to the outcome coefficients, one row per cluster.
    """

    values: NDArray[np.float64]
    d_eta: NDArray[np.float64]
    d_beta: NDArray[np.float64]


@dataclass(frozen=True)
class StrataTerms:
    values: NDArray[np.float64]
    d_gamma1: NDArray[np.float64]
    d_rho1_s2: NDArray[np.float64]
    d_gamma2: NDArray[np.float64]
    d_beta: NDArray[np.float64]


def _mean(values: NDArray[np.float64], ordered: bool) -> float:
    if ordered:
        return math.fsum(values) / values.size
    return float(np.mean(values))


def _check_policy(policy: PolicySpec, strata: bool) -> None:
    if not policy.is_solved:
        raise PolicyStateError(f"Policy alpha={policy.alpha} has not been solved (gamma0={policy.gamma0})")
    if policy.is_strata != strata:
        layout = "two-strata" if policy.is_strata else "single-stratum"
        raise PolicyStateError(f"Policy alpha={policy.alpha} was solved for a {layout} layout")


def standardized_terms(
    gamma: float,
    treatment_slopes: ArrayLike,
    treatment_link: LinkFunction,
    outcome_fit: OutcomeModelFit,
    arrays: ClusterArrays,
) -> StandardizedTerms:
    """
    Evaluates v_i = sum_k E(Y | k/n_i, L_i) pmf(n_i, k, g^-1(gamma + rho_1 L_i)) for every cluster,
    grouping clusters of equal size so each group is one pmf matrix.

    The treatment derivative uses d/dp sum_k pmf(n,k,p) E_k = n sum_t pmf(n-1,t,p) (E_{t+1} - E_t).
    """
    slopes = np.asarray(treatment_slopes, dtype=float).ravel()
    link_y = outcome_fit.link
    eta_s = gamma + arrays.covariates @ slopes
    p = treatment_link.inverse(eta_s)
    base_y = outcome_fit.intercept + arrays.covariates @ outcome_fit.slopes

    values = np.empty(arrays.m)
    d_p = np.empty(arrays.m)
    d_beta = np.empty((arrays.m, outcome_fit.beta.size))
    q = arrays.n_covariates
    for size in np.unique(arrays.n):
        n = int(size)
        rows = np.flatnonzero(arrays.n == size)
        share = np.arange(n + 1, dtype=float) / n
        eta_y = base_y[rows, None] + outcome_fit.s_coef * share[None, :]
        fitted = link_y.inverse(eta_y)
        pmf = binomial_pmf_row(n, p[rows])
        values[rows] = np.sum(pmf * fitted, axis=1)
        d_p[rows] = n * np.sum(binomial_pmf_row(n - 1, p[rows]) * np.diff(fitted, axis=1), axis=1)

        weighted = pmf * link_y.density(eta_y)
        mass = weighted.sum(axis=1)
        d_beta[rows, 0] = mass
        d_beta[rows, 1 : 1 + q] = mass[:, None] * arrays.covariates[rows]
        d_beta[rows, 1 + q] = weighted @ share
    return StandardizedTerms(values=values, d_eta=treatment_link.density(eta_s) * d_p, d_beta=d_beta)


def estimate_mu(
    policy: PolicySpec,
    outcome_fit: OutcomeModelFit,
    treatment_slopes: ArrayLike,
    data: ClusterData,
    *,
    treatment_link: LinkFunction,
    ordered: bool = False,
) -> float:
    """
    Computes the policy mean m^-1 sum_i sum_k E(Y | k/n_i, L_i) P_alpha(S = k/n_i | L_i).

    :param policy: Solved single-stratum policy.
    :param outcome_fit: Fitted outcome model without an S2 term.
    :param treatment_slopes: Covariate coefficients of the treatment model.
    :param data: Cluster records.
    :param treatment_link: Link of the treatment model.
    :param ordered: Exactly rounded summation over clusters.
    :return: The estimate, inside [0, 1].
    :raises PolicyStateError: On an unsolved or two-strata policy or an outcome fit with S2.
    """
    _check_policy(policy, strata=False)
    if outcome_fit.include_s2:
        raise PolicyStateError("Outcome model includes S2; use the two-strata estimator")
    arrays = as_arrays(data)
    terms = standardized_terms(policy.gamma0, treatment_slopes, treatment_link, outcome_fit, arrays)
    return _mean(terms.values, ordered)


def estimate_delta(
    policy: PolicySpec,
    policy_prime: PolicySpec,
    outcome_fit: OutcomeModelFit,
    treatment_slopes: ArrayLike,
    data: ClusterData,
    *,
    treatment_link: LinkFunction,
    ordered: bool = False,
) -> float:
    """Difference of policy means mu(alpha) - mu(alpha')."""
    if policy.is_strata != policy_prime.is_strata:
        raise PolicyStateError(f"Policies alpha={policy.alpha} and alpha'={policy_prime.alpha} use different strata layouts")
    mu = estimate_mu(policy, outcome_fit, treatment_slopes, data, ordered=ordered, treatment_link=treatment_link)
    mu_prime = estimate_mu(policy_prime, outcome_fit, treatment_slopes, data, ordered=ordered, treatment_link=treatment_link)
    return mu - mu_prime


def _lattice_window(pmf: NDArray[np.float64], guarded: bool) -> slice:
    return mass_window(pmf, LATTICE_TAIL) if guarded else slice(0, pmf.size)


def strata_terms(
    gamma1: float,
    gamma2: float,
    fit_s1: TreatmentModelFit,
    fit_s2: TreatmentModelFit,
    outcome_fit: OutcomeModelFit,
    arrays: ClusterArrays,
) -> StrataTerms:
    """
    Two-strata standardisation: for each cluster, v = sum_j pmf(n2, j, p2) sum_k pmf(n1, k, p1_j) E(Y | k/n1, j/n2, L)
    with p2 = g2^-1(gamma2 + L rho_2) and p1_j = g1^-1(gamma1 + L rho_1 + rho_S2 j/n2).

    When n1 * n2 exceeds ``LATTICE_GUARD`` the S2 lattice is cut to the window carrying all
    but ``LATTICE_TAIL`` of its mass.
    """
    assert arrays.n2 is not None
    link1, link2, link_y = fit_s1.link, fit_s2.link, outcome_fit.link
    q = arrays.n_covariates
    eta2_all = gamma2 + arrays.covariates @ fit_s2.slopes
    base1_all = gamma1 + arrays.covariates @ fit_s1.slopes
    base_y_all = outcome_fit.intercept + arrays.covariates @ outcome_fit.slopes

    values = np.empty(arrays.m)
    d_gamma1 = np.empty(arrays.m)
    d_rho1_s2 = np.empty(arrays.m)
    d_gamma2 = np.empty(arrays.m)
    d_beta = np.empty((arrays.m, outcome_fit.beta.size))

    for i in range(arrays.m):
        n1, n2 = int(arrays.n[i]), int(arrays.n2[i])
        p2 = float(link2.inverse(eta2_all[i]))
        pmf2 = binomial_pmf_row(n2, p2)
        window = _lattice_window(pmf2, n1 * n2 > LATTICE_GUARD)
        j = np.arange(n2 + 1, dtype=float)[window]
        share2 = j / n2
        weight2 = pmf2[window]

        eta1 = base1_all[i] + fit_s1.s2_coef * share2
        p1 = link1.inverse(eta1)
        share1 = np.arange(n1 + 1, dtype=float) / n1
        eta_y = base_y_all[i] + outcome_fit.s_coef * share1[None, :] + outcome_fit.s2_coef * share2[:, None]
        fitted = link_y.inverse(eta_y)
        pmf1 = binomial_pmf_row(n1, p1)

        inner = np.sum(pmf1 * fitted, axis=1)
        values[i] = float(weight2 @ inner)

        d_inner_p1 = n1 * np.sum(binomial_pmf_row(n1 - 1, p1) * np.diff(fitted, axis=1), axis=1)
        d_inner_eta1 = link1.density(eta1) * d_inner_p1
        d_gamma1[i] = float(weight2 @ d_inner_eta1)
        d_rho1_s2[i] = float(weight2 @ (d_inner_eta1 * share2))

        # d/dp2 over the (possibly trimmed) lattice
        lower = binomial_pmf_row(n2 - 1, p2)[window.start : window.stop - 1]
        d_gamma2[i] = float(link2.density(eta2_all[i])) * n2 * float(lower @ np.diff(inner))

        weighted = weight2[:, None] * pmf1 * link_y.density(eta_y)
        mass = float(weighted.sum())
        d_beta[i, 0] = mass
        d_beta[i, 1 : 1 + q] = mass * arrays.covariates[i]
        d_beta[i, 1 + q] = float(np.sum(weighted @ share1))
        if outcome_fit.include_s2:
            d_beta[i, 2 + q] = float(weighted.sum(axis=1) @ share2)
    return StrataTerms(values=values, d_gamma1=d_gamma1, d_rho1_s2=d_rho1_s2, d_gamma2=d_gamma2, d_beta=d_beta)


def estimate_mu_strata(
    policy: PolicySpec,
    fit_s1: TreatmentModelFit,
    fit_s2: TreatmentModelFit,
    outcome_fit: OutcomeModelFit,
    data: ClusterData,
    ordered: bool = False,
) -> float:
    """
    Two-strata policy mean, averaging the double standardisation over clusters.

    :raises SchemaError: If the data lack s2/n2.
    :raises PolicyStateError: If the policy was not solved for two strata.
    """
    arrays = as_arrays(data, require_strata=True)
    _check_policy(policy, strata=True)
    assert policy.gamma0_strata2 is not None
    terms = strata_terms(policy.gamma0, policy.gamma0_strata2, fit_s1, fit_s2, outcome_fit, arrays)
    return _mean(terms.values, ordered)
