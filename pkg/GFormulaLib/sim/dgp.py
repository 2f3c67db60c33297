"""Data generating process for simulation studies and the exact estimand values it implies."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from GFormulaLib.core.kernel import binomial_pmf_row
from GFormulaLib.core.policy import solve_intercept
from GFormulaLib.models.data_classes import ClusterRecord, OutcomeDefinition
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from collections.abc import Iterable

    from loguru import Logger
    from numpy.typing import NDArray

    from GFormulaLib.config.settings import DgpConfig

logger: Logger = get_logger(__name__)


class Stream:
    """Independent random streams within one replicate."""

    SIZE = 0
    L1 = 1
    L2 = 2
    TREATMENT = 3
    OUTCOME = 4


QUADRATURE_ORDER = 64
QUADRATURE_TOLERANCE = 1e-8
MAX_QUADRATURE_ORDER = 1024


def mu_label(alpha: float) -> str:
    return f"mu({float(alpha)!r})"


def delta_label(alpha: float, alpha_prime: float) -> str:
    return f"delta({float(alpha)!r},{float(alpha_prime)!r})"


def replicate_rng(seed: int, replicate_index: int, stream: int) -> np.random.Generator:
    """Philox generator keyed by (seed, replicate, stream); replicates can run in any order or process."""
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(replicate_index, stream))
    return np.random.Generator(np.random.Philox(sequence))


def _draw_atoms(rng: np.random.Generator, law: dict[int, float], size: int) -> NDArray[np.int64]:
    atoms = np.array(sorted(law), dtype=np.int64)
    probs = np.array([law[a] for a in atoms], dtype=float)
    return rng.choice(atoms, size=size, p=probs / probs.sum())


def generate_dataset(config: DgpConfig, replicate_index: int) -> list[ClusterRecord]:
    """
    Draws one simulated data set of ``config.m`` clusters.

    Sizes, both covariates, treated counts and outcome counts each come from their own
    stream, so the data set depends only on (seed, replicate_index). The outcome is
    binomial over the individuals the outcome definition counts; clusters where nobody
    counts get y = 0 with a zero denominator.

    :param config: The data generating law.
    :param replicate_index: Replicate number.
    :return: The cluster records, covariates ordered (L1, L2).
    """
    m = config.m
    link = config.link_function
    sizes = _draw_atoms(replicate_rng(config.seed, replicate_index, Stream.SIZE), config.size_law, m)
    l1 = replicate_rng(config.seed, replicate_index, Stream.L1).normal(config.l1_mean, config.l1_sd, size=m)
    l2 = _draw_atoms(replicate_rng(config.seed, replicate_index, Stream.L2), config.l2_law, m).astype(float)

    rho0, rho1, rho2 = config.rho
    p_treat = link.inverse(rho0 + rho1 * l1 + rho2 * l2)
    treated = replicate_rng(config.seed, replicate_index, Stream.TREATMENT).binomial(sizes, p_treat)
    s = treated / sizes

    beta0, beta1, beta_s, beta2 = config.beta
    p_outcome = link.inverse(beta0 + beta1 * l1 + beta2 * l2 + beta_s * s)
    if config.outcome_def is OutcomeDefinition.OVERALL:
        denominators = sizes
    elif config.outcome_def is OutcomeDefinition.WHEN_TREATED:
        denominators = treated
    else:
        denominators = sizes - treated
    events = replicate_rng(config.seed, replicate_index, Stream.OUTCOME).binomial(denominators, p_outcome)

    return [
        ClusterRecord(
            id=i,
            n=int(sizes[i]),
            covariates=(float(l1[i]), float(l2[i])),
            s=float(s[i]),
            y=float(events[i] / denominators[i]) if denominators[i] > 0 else 0.0,
            y_denominator=int(denominators[i]),
        )
        for i in range(m)
    ]


def _covariate_mixture(config: DgpConfig, order: int) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """Joint (L1, L2) support with probability weights: Gauss-Hermite nodes for L1 times the L2 atoms."""
    if config.l1_sd == 0.0:
        nodes, weights = np.array([0.0]), np.array([1.0])
    else:
        nodes, weights = hermegauss(order)
        weights = weights / math.sqrt(2.0 * math.pi)
    l1 = config.l1_mean + config.l1_sd * nodes
    l2_atoms = np.array(sorted(config.l2_law), dtype=float)
    l2_probs = np.array([config.l2_law[int(a)] for a in l2_atoms])
    grid_l1, grid_l2 = np.meshgrid(l1, l2_atoms, indexing="ij")
    grid_w = np.outer(weights, l2_probs)
    return grid_l1.ravel(), grid_l2.ravel(), grid_w.ravel()


def _truth_at_order(config: DgpConfig, alpha: float, order: int) -> tuple[float, float]:
    link = config.link_function
    l1, l2, weight = _covariate_mixture(config, order)
    _, rho1, rho2 = config.rho
    gamma = solve_intercept(alpha, rho1 * l1 + rho2 * l2, weight, link).gamma
    p = link.inverse(gamma + rho1 * l1 + rho2 * l2)

    beta0, beta1, beta_s, beta2 = config.beta
    base = beta0 + beta1 * l1 + beta2 * l2
    total = 0.0
    for size, prob in config.size_law.items():
        share = np.arange(size + 1, dtype=float) / size
        fitted = link.inverse(base[:, None] + beta_s * share[None, :])
        standardized = np.sum(binomial_pmf_row(size, p) * fitted, axis=1)
        total += prob * float(weight @ standardized)
    return total, gamma


def analytic_truth(config: DgpConfig, alpha: float) -> float:
    """
    Exact policy mean under the data generating law.

    The policy intercept is solved against the law itself; L1 is integrated with
    probabilists' Gauss-Hermite quadrature starting at order 64 and doubled until the
    value moves by less than 1e-8, and the sums over L2 and cluster size are exact.

    :param config: The data generating law.
    :param alpha: Policy in (0, 1).
    :return: The true policy mean.
    """
    order = QUADRATURE_ORDER
    value, gamma = _truth_at_order(config, alpha, order)
    if config.l1_sd == 0.0:
        return value
    while order < MAX_QUADRATURE_ORDER:
        order *= 2
        refined, gamma = _truth_at_order(config, alpha, order)
        if abs(refined - value) < QUADRATURE_TOLERANCE:
            value = refined
            break
        value = refined
    else:
        logger.warning(f"Quadrature for alpha={alpha} did not settle below {QUADRATURE_TOLERANCE:g} by order {order}")
    logger.debug(f"Truth for alpha={alpha}: mu={value:.12g}, gamma={gamma:.12g} (quadrature order {order})")
    return value


def analytic_truths(config: DgpConfig, alphas: Iterable[float], contrasts: Iterable[tuple[float, float]] = ()) -> dict[str, float]:
    """True values keyed by estimand label, e.g. ``mu(0.4)`` and ``delta(0.6,0.4)``."""
    mus = {alpha: analytic_truth(config, alpha) for alpha in alphas}
    truths = {mu_label(alpha): value for alpha, value in mus.items()}
    for a, b in contrasts:
        for alpha in (a, b):
            if alpha not in mus:
                mus[alpha] = analytic_truth(config, alpha)
        truths[delta_label(a, b)] = mus[a] - mus[b]
    return truths
