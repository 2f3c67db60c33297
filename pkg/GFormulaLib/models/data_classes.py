from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import TYPE_CHECKING, Any

import numpy as np
import pandas as pd

from GFormulaLib.core.kernel import LinkFunction
from GFormulaLib.models.errors import DataValidationError, EmptyDatasetError, SchemaError

if TYPE_CHECKING:
    from collections.abc import Hashable, Sequence

    from numpy.typing import NDArray

INTEGRALITY_TOLERANCE = 1e-9


class OutcomeDefinition(Enum):
    OVERALL = "overall"
    WHEN_TREATED = "when_treated"
    WHEN_UNTREATED = "when_untreated"

    def __str__(self) -> str:
        return self.value.replace("_", " ").title()

    def denominator(self, n: int, s: float) -> int:
        """Number of individuals contributing to the cluster outcome."""
        if self is OutcomeDefinition.OVERALL:
            return n
        if self is OutcomeDefinition.WHEN_TREATED:
            return round(n * s)
        return round(n * (1.0 - s))


class Stratum(Enum):
    CHILD = "child"
    OTHER = "other"


class AnalysisStage(Enum):
    INGEST = auto()
    CLUSTER = auto()
    AGGREGATE = auto()
    FIT = auto()
    SOLVE = auto()
    ESTIMATE = auto()
    VARIANCE = auto()
    WRITE = auto()

    def __str__(self) -> str:
        return self.name.replace("_", " ").title()


class Linkage(Enum):
    SINGLE = "single"
    COMPLETE = "complete"


def _is_integral(value: float) -> bool:
    return abs(value - round(value)) <= INTEGRALITY_TOLERANCE


@dataclass(frozen=True)
class ClusterRecord:
    id: Hashable
    n: int
    covariates: tuple[float, ...]
    s: float
    y: float
    y_denominator: int
    s2: float | None = None
    n2: int | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.n, (int, np.integer)) or self.n < 1:
            raise DataValidationError(f"Cluster {self.id}: size must be a positive integer, got {self.n}")
        if not 0.0 <= self.s <= 1.0:
            raise DataValidationError(f"Cluster {self.id}: treated proportion {self.s} outside [0, 1]")
        if not _is_integral(self.s * self.n):
            raise DataValidationError(f"Cluster {self.id}: s*n = {self.s * self.n} is not an integer count")
        if not 0.0 <= self.y <= 1.0:
            raise DataValidationError(f"Cluster {self.id}: outcome proportion {self.y} outside [0, 1]")
        if self.y_denominator < 0:
            raise DataValidationError(f"Cluster {self.id}: negative outcome denominator {self.y_denominator}")
        if self.y_denominator == 0 and self.y != 0.0:
            raise DataValidationError(f"Cluster {self.id}: outcome must be 0 when no individual contributes to it")
        if not _is_integral(self.y * self.y_denominator):
            raise DataValidationError(f"Cluster {self.id}: y*denominator = {self.y * self.y_denominator} is not an integer count")
        if any(not math.isfinite(c) for c in self.covariates):
            raise DataValidationError(f"Cluster {self.id}: non-finite covariate value")
        if (self.s2 is None) != (self.n2 is None):
            raise DataValidationError(f"Cluster {self.id}: s2 and n2 must be given together")
        if self.n2 is not None and self.s2 is not None:
            if self.n2 < 1:
                raise DataValidationError(f"Cluster {self.id}: second-stratum size must be positive, got {self.n2}")
            if not 0.0 <= self.s2 <= 1.0 or not _is_integral(self.s2 * self.n2):
                raise DataValidationError(f"Cluster {self.id}: invalid second-stratum proportion {self.s2} for n2={self.n2}")

    @property
    def treated(self) -> int:
        return round(self.s * self.n)

    @property
    def events(self) -> int:
        return round(self.y * self.y_denominator)

    @property
    def has_strata(self) -> bool:
        return self.n2 is not None


@dataclass(frozen=True)
class ClusterArrays:
    """Column view of a ClusterRecord sequence used by the numerical code."""

    n: NDArray[np.int64]
    covariates: NDArray[np.float64]
    s: NDArray[np.float64]
    treated: NDArray[np.float64]
    y_denominator: NDArray[np.float64]
    events: NDArray[np.float64]
    s2: NDArray[np.float64] | None = None
    n2: NDArray[np.int64] | None = None
    treated2: NDArray[np.float64] | None = None

    @classmethod
    def from_records(cls, records: Sequence[ClusterRecord], require_strata: bool = False) -> ClusterArrays:
        if not records:
            raise EmptyDatasetError("No cluster records supplied")
        dims = {len(r.covariates) for r in records}
        if len(dims) != 1:
            raise DataValidationError(f"Covariate dimension differs between clusters: {sorted(dims)}")
        q = dims.pop()
        strata_present = [r.has_strata for r in records]
        if require_strata and not all(strata_present):
            missing = next(r.id for r in records if not r.has_strata)
            raise SchemaError(f"Cluster {missing} lacks the second-stratum fields s2/n2")

        covariates = np.array([r.covariates for r in records], dtype=float).reshape(len(records), q)
        arrays: dict[str, Any] = {
            "n": np.array([r.n for r in records], dtype=np.int64),
            "covariates": covariates,
            "s": np.array([r.s for r in records], dtype=float),
            "treated": np.array([r.treated for r in records], dtype=float),
            "y_denominator": np.array([r.y_denominator for r in records], dtype=float),
            "events": np.array([r.events for r in records], dtype=float),
        }
        if all(strata_present):
            arrays["n2"] = np.array([r.n2 for r in records], dtype=np.int64)
            arrays["s2"] = np.array([r.s2 for r in records], dtype=float)
            arrays["treated2"] = np.rint(arrays["s2"] * arrays["n2"])
        return cls(**arrays)

    @property
    def m(self) -> int:
        return int(self.n.size)

    @property
    def n_covariates(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def has_strata(self) -> bool:
        return self.n2 is not None


@dataclass(frozen=True)
class TreatmentModelFit:
    rho: NDArray[np.float64]
    link: LinkFunction
    converged: bool
    iterations: int
    loglik: float
    stratum: int = 1
    condition_on_s2: bool = False

    @property
    def intercept(self) -> float:
        return float(self.rho[0])

    @property
    def slopes(self) -> NDArray[np.float64]:
        """Covariate coefficients (excluding any S2 coefficient)."""
        return self.rho[1:-1] if self.condition_on_s2 else self.rho[1:]

    @property
    def s2_coef(self) -> float:
        return float(self.rho[-1]) if self.condition_on_s2 else 0.0


@dataclass(frozen=True)
class OutcomeModelFit:
    beta: NDArray[np.float64]
    link: LinkFunction
    converged: bool
    iterations: int
    loglik: float
    include_s2: bool = False

    @property
    def intercept(self) -> float:
        return float(self.beta[0])

    @property
    def n_covariates(self) -> int:
        return self.beta.size - (3 if self.include_s2 else 2)

    @property
    def slopes(self) -> NDArray[np.float64]:
        return self.beta[1 : 1 + self.n_covariates]

    @property
    def s_coef(self) -> float:
        return float(self.beta[1 + self.n_covariates])

    @property
    def s2_coef(self) -> float:
        return float(self.beta[-1]) if self.include_s2 else 0.0


@dataclass(frozen=True)
class PolicySpec:
    alpha: float
    gamma0: float
    residual: float = 0.0
    gamma0_strata2: float | None = None
    alpha_strata2: float | None = None

    @property
    def is_strata(self) -> bool:
        return self.gamma0_strata2 is not None

    @property
    def is_solved(self) -> bool:
        return math.isfinite(self.gamma0) and (self.gamma0_strata2 is None or math.isfinite(self.gamma0_strata2))


@dataclass(frozen=True)
class SandwichResult:
    U: NDArray[np.float64]
    W: NDArray[np.float64]
    sigma: NDArray[np.float64]
    se: NDArray[np.float64]
    block_index: dict[str, slice]
    condition_number: float
    jacobian_discrepancy: float | None = None

    def block_se(self, name: str) -> NDArray[np.float64]:
        return self.se[self.block_index[name]]


@dataclass(frozen=True)
class EstimateReport:
    alpha_grid: tuple[float, ...]
    gamma0: tuple[float, ...]
    mu_hat: tuple[float, ...]
    se_mu: tuple[float, ...]
    mu_ci_lower: tuple[float, ...]
    mu_ci_upper: tuple[float, ...]
    contrasts: tuple[tuple[float, float], ...]
    delta_hat: tuple[float, ...]
    se_delta: tuple[float, ...]
    delta_ci_lower: tuple[float, ...]
    delta_ci_upper: tuple[float, ...]
    outcome_def: OutcomeDefinition
    strata: bool = False
    condition_number: float = float("nan")

    def mu(self, alpha: float) -> float:
        return self.mu_hat[self.alpha_grid.index(alpha)]

    def delta(self, alpha: float, alpha_prime: float) -> float:
        return self.delta_hat[self.contrasts.index((alpha, alpha_prime))]

    def to_frames(self) -> tuple[pd.DataFrame, pd.DataFrame]:
        """Plot-ready grids: one row per alpha, and one row per contrast."""
        estimates = pd.DataFrame(
            {
                "alpha": self.alpha_grid,
                "gamma0": self.gamma0,
                "mu_hat": self.mu_hat,
                "se": self.se_mu,
                "ci_lower": self.mu_ci_lower,
                "ci_upper": self.mu_ci_upper,
            }
        )
        contrasts = pd.DataFrame(
            {
                "alpha": [a for a, _ in self.contrasts],
                "alpha_prime": [b for _, b in self.contrasts],
                "delta_hat": self.delta_hat,
                "se": self.se_delta,
                "ci_lower": self.delta_ci_lower,
                "ci_upper": self.delta_ci_upper,
            },
            columns=["alpha", "alpha_prime", "delta_hat", "se", "ci_lower", "ci_upper"],
        )
        return estimates, contrasts


@dataclass(frozen=True)
class Individual:
    stratum: Stratum
    treated: bool
    outcome: bool | None
    covariates: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class HouseholdPoint:
    household_id: str
    lat: float
    lon: float
    members: tuple[Individual, ...] = ()

    def __post_init__(self) -> None:
        if not -90.0 <= self.lat <= 90.0:
            raise DataValidationError(f"Household {self.household_id}: latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise DataValidationError(f"Household {self.household_id}: longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class StudyRow:
    estimator: str
    truth: float
    bias: float
    coverage: float
    ase: float
    ese: float | None
    ser: float | None


@dataclass(frozen=True)
class SimStudyResult:
    rows: tuple[StudyRow, ...]
    replicates: int
    failures: int
    outcome_def: OutcomeDefinition

    @property
    def failure_rate(self) -> float:
        return self.failures / self.replicates if self.replicates else 0.0

    def row(self, estimator: str) -> StudyRow:
        for row in self.rows:
            if row.estimator == estimator:
                return row
        raise KeyError(estimator)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.estimator, r.truth, r.bias, r.coverage, r.ase, r.ese, r.ser) for r in self.rows],
            columns=["estimator", "truth", "bias", "cov", "ase", "ese", "ser"],
        )
