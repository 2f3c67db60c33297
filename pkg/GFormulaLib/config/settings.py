from __future__ import annotations

import json
import math
from pathlib import Path
from typing import TYPE_CHECKING, Any, TypeVar

import tomli
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from GFormulaLib.core.kernel import LinkFunction, LinkKind
from GFormulaLib.models.data_classes import Linkage, OutcomeDefinition
from GFormulaLib.models.errors import ConfigError
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from loguru import Logger

logger: Logger = get_logger(__name__)

MASS_TOLERANCE = 1e-12
LOGIT_06 = math.log(0.6 / 0.4)


def _check_probability(v: float, what: str) -> float:
    if not (math.isfinite(v) and 0.0 < v < 1.0):
        raise ValueError(f"{what} must lie strictly inside (0, 1), got {v}")
    return v


def _check_mass_function(v: dict[Any, float], what: str) -> dict[Any, float]:
    if not v:
        raise ValueError(f"{what} must have at least one atom")
    if any(p < 0.0 or not math.isfinite(p) for p in v.values()):
        raise ValueError(f"{what} has a negative or non-finite probability")
    total = math.fsum(v.values())
    if abs(total - 1.0) > MASS_TOLERANCE:
        raise ValueError(f"{what} sums to {total!r}, not 1")
    return v


class InputSection(BaseModel):
    individuals_csv: Path | None = None
    clusters_csv: Path | None = None

    @model_validator(mode="after")
    def exactly_one_source(self) -> InputSection:
        if (self.individuals_csv is None) == (self.clusters_csv is None):
            raise ValueError("Configure exactly one of input.individuals_csv and input.clusters_csv")
        return self

    @property
    def source(self) -> Path:
        path = self.individuals_csv or self.clusters_csv
        assert path is not None
        return path


class ModelSection(BaseModel):
    outcome_def: OutcomeDefinition = OutcomeDefinition.OVERALL
    link: LinkKind = LinkKind.LOGIT
    covariates: list[str] = Field(default_factory=list)
    strata: bool = False
    standardize_covariates: bool = False
    include_size_covariate: bool = False

    @field_validator("covariates")
    @classmethod
    def unique_covariates(cls, v: list[str]) -> list[str]:
        duplicates = sorted({c for c in v if v.count(c) > 1})
        if duplicates:
            raise ValueError(f"Duplicate covariate columns: {', '.join(duplicates)}")
        return v

    @property
    def link_function(self) -> LinkFunction:
        return LinkFunction(self.link)


class PolicySection(BaseModel):
    alphas: list[float] = Field(default_factory=lambda: [0.4, 0.5, 0.6])
    contrasts: list[tuple[float, float]] = Field(default_factory=list)
    reference_alpha: float | None = None
    alphas_strata2: list[float] | None = None

    @field_validator("alphas")
    @classmethod
    def validate_alphas(cls, v: list[float]) -> list[float]:
        """
        Checks that the policy grid is non-empty, that every alpha lies strictly inside
        (0, 1) and that no alpha is repeated.

        :param v: The configured policy grid.
        :type v: list[float]
        :return: The validated grid, in the configured order.
        :rtype: list[float]
        :raises ValueError: If the grid is empty, has duplicates or an alpha outside (0, 1).
        """
        if not v:
            raise ValueError("policy.alphas must not be empty")
        for alpha in v:
            _check_probability(alpha, "Policy alpha")
        if len(set(v)) != len(v):
            raise ValueError(f"policy.alphas contains duplicates: {v}")
        return v

    @field_validator("reference_alpha")
    @classmethod
    def validate_reference(cls, v: float | None) -> float | None:
        return None if v is None else _check_probability(v, "Reference alpha")

    @model_validator(mode="after")
    def check_contrasts(self) -> PolicySection:
        if self.reference_alpha is not None and self.reference_alpha not in self.alphas:
            self.alphas = [*self.alphas, self.reference_alpha]
        for a, b in self.contrasts:
            if a not in self.alphas or b not in self.alphas:
                raise ValueError(f"Contrast ({a}, {b}) uses an alpha outside policy.alphas")
        if self.alphas_strata2 is not None:
            if len(self.alphas_strata2) != len(self.alphas):
                raise ValueError("policy.alphas_strata2 needs one target per alpha")
            for alpha in self.alphas_strata2:
                _check_probability(alpha, "Second-stratum alpha")
        return self

    def all_contrasts(self) -> list[tuple[float, float]]:
        """Explicit contrasts followed by (alpha, reference) for every other alpha in the grid."""
        pairs = list(self.contrasts)
        if self.reference_alpha is not None:
            pairs += [(a, self.reference_alpha) for a in self.alphas if a != self.reference_alpha and (a, self.reference_alpha) not in pairs]
        return pairs


class ClusteringSection(BaseModel):
    threshold_km: float = 10.0
    linkage: Linkage = Linkage.SINGLE

    @field_validator("threshold_km")
    @classmethod
    def positive_threshold(cls, v: float) -> float:
        if not (math.isfinite(v) and v > 0.0):
            raise ValueError(f"clustering.threshold_km must be positive, got {v}")
        return v


class RunSection(BaseModel):
    seed: int = 0
    threads: int = 1
    ordered_summation: bool = False
    check_jacobian: bool = False

    @field_validator("threads")
    @classmethod
    def at_least_one_thread(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"run.threads must be at least 1, got {v}")
        return v


class OutputSection(BaseModel):
    directory: Path = Path("gformula_output")


# noinspection PyNestedDecorators
class AnalysisConfig(BaseModel):
    input: InputSection
    model: ModelSection = Field(default_factory=ModelSection)
    policy: PolicySection = Field(default_factory=PolicySection)
    clustering: ClusteringSection = Field(default_factory=ClusteringSection)
    run: RunSection = Field(default_factory=RunSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def check_strata_targets(self) -> AnalysisConfig:
        if self.policy.alphas_strata2 is not None and not self.model.strata:
            raise ValueError("policy.alphas_strata2 requires model.strata = true")
        return self

    def resolve_paths(self, base: Path) -> AnalysisConfig:
        """Makes relative input and output paths relative to ``base`` (the config file directory)."""
        update: dict[str, Any] = {}
        if self.input.individuals_csv and not self.input.individuals_csv.is_absolute():
            update["individuals_csv"] = base / self.input.individuals_csv
        if self.input.clusters_csv and not self.input.clusters_csv.is_absolute():
            update["clusters_csv"] = base / self.input.clusters_csv
        config = self.model_copy(update={"input": self.input.model_copy(update=update)}) if update else self
        if not config.output.directory.is_absolute():
            config = config.model_copy(update={"output": OutputSection(directory=base / config.output.directory)})
        return config

    @classmethod
    def from_cli_args(  # noqa: PLR0913
        cls,
        config_path: Path,
        seed: int | None = None,
        threads: int | None = None,
        ordered_summation: bool | None = None,
        threshold_km: float | None = None,
        output_dir: Path | None = None,
    ) -> AnalysisConfig:
        """
        Loads a configuration file and applies command-line overrides on top of it.
        Options left as None keep the file's value.

        :param config_path: TOML or JSON configuration, or a previous run manifest.
        :param seed: Overrides ``run.seed``.
        :param threads: Overrides ``run.threads``.
        :param ordered_summation: Overrides ``run.ordered_summation`` when given.
        :param threshold_km: Overrides ``clustering.threshold_km``.
        :param output_dir: Overrides ``output.directory``.
        :return: The validated configuration.
        :raises ConfigError: If the file cannot be read or an override is invalid.
        """
        config = load_analysis_config(config_path)
        data = config.model_dump()
        if seed is not None:
            data["run"]["seed"] = seed
            logger.debug(f"Seed overridden from the command line: {seed}")
        if threads is not None:
            data["run"]["threads"] = threads
        if ordered_summation:
            data["run"]["ordered_summation"] = True
        if threshold_km is not None:
            data["clustering"]["threshold_km"] = threshold_km
            logger.debug(f"Clustering threshold overridden from the command line: {threshold_km} km")
        if output_dir is not None:
            data["output"]["directory"] = output_dir
        return _validate(cls, data, config_path)


class DgpConfig(BaseModel):
    """Cluster-level data generating law: sizes, two covariates, binomial treatment and outcome."""

    m: int = 125
    size_law: dict[int, float] = Field(default_factory=lambda: {8: 0.4, 16: 0.35, 20: 0.25})
    l1_mean: float = 40.0
    l1_sd: float = 10.0
    l2_law: dict[int, float] = Field(default_factory=lambda: {0: 5 / 18, 1: 3 / 18, 2: 4 / 18, 3: 5 / 18, 4: 1 / 18})
    # (intercept, L1, L2)
    rho: tuple[float, float, float] = (LOGIT_06, -0.01, -0.01)
    # (intercept, L1, S, L2)
    beta: tuple[float, float, float, float] = (LOGIT_06, -0.01, -0.8, -0.01)
    outcome_def: OutcomeDefinition = OutcomeDefinition.OVERALL
    link: LinkKind = LinkKind.LOGIT
    seed: int = 20240101

    @field_validator("m")
    @classmethod
    def enough_clusters(cls, v: int) -> int:
        if v < 2:
            raise ValueError(f"m must be at least 2, got {v}")
        return v

    @field_validator("size_law")
    @classmethod
    def validate_size_law(cls, v: dict[int, float]) -> dict[int, float]:
        if any(n < 1 for n in v):
            raise ValueError("Cluster sizes must be positive")
        return _check_mass_function(v, "size_law")

    @field_validator("l2_law")
    @classmethod
    def validate_l2_law(cls, v: dict[int, float]) -> dict[int, float]:
        return _check_mass_function(v, "l2_law")

    @field_validator("l1_sd")
    @classmethod
    def non_negative_sd(cls, v: float) -> float:
        if v < 0.0:
            raise ValueError(f"l1_sd must be non-negative, got {v}")
        return v

    @property
    def link_function(self) -> LinkFunction:
        return LinkFunction(self.link)


class StudyConfig(BaseModel):
    dgp: DgpConfig = Field(default_factory=DgpConfig)
    alphas: list[float] = Field(default_factory=lambda: [0.4, 0.5, 0.6])
    contrasts: list[tuple[float, float]] = Field(default_factory=lambda: [(0.6, 0.4), (0.6, 0.5), (0.5, 0.4)])
    replicates: int = 1000
    workers: int = 1
    output: Path | None = None

    @field_validator("alphas")
    @classmethod
    def validate_alphas(cls, v: list[float]) -> list[float]:
        for alpha in v:
            _check_probability(alpha, "Policy alpha")
        if not v or len(set(v)) != len(v):
            raise ValueError(f"alphas must be non-empty and unique, got {v}")
        return v

    @field_validator("replicates", "workers")
    @classmethod
    def positive_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"Must be at least 1, got {v}")
        return v

    @model_validator(mode="after")
    def contrasts_in_grid(self) -> StudyConfig:
        for a, b in self.contrasts:
            if a not in self.alphas or b not in self.alphas:
                raise ValueError(f"Contrast ({a}, {b}) uses an alpha outside {self.alphas}")
        return self


def _read_mapping(path: Path) -> dict[str, Any]:
    if not path.is_file():
        raise ConfigError(f"Configuration file not found: {path}")
    try:
        if path.suffix.lower() == ".toml":
            with path.open("rb") as f:
                return tomli.load(f)
        with path.open(encoding="utf-8") as f:
            data = json.load(f)
    except (tomli.TOMLDecodeError, json.JSONDecodeError, OSError) as e:
        raise ConfigError(f"Could not read configuration {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Configuration {path} must contain a table/object at the top level")
    return data


T = TypeVar("T", bound=BaseModel)


def _validate(model: type[T], data: dict[str, Any], path: Path) -> T:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        details = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid configuration {path}: {details}") from e


def load_analysis_config(path: Path) -> AnalysisConfig:
    """
    Reads an analysis configuration from TOML or JSON. A run manifest is accepted as well:
    its ``config`` block is the configuration that produced it.

    :raises ConfigError: If the file is missing, unparsable or invalid.
    """
    data = _read_mapping(path)
    if "config" in data and isinstance(data["config"], dict):
        logger.info(f"Loading configuration from run manifest {path}")
        data = data["config"]
    return _validate(AnalysisConfig, data, path).resolve_paths(path.parent)


def load_study_config(path: Path) -> StudyConfig:
    """Reads a simulation study configuration from TOML or JSON."""
    data = _read_mapping(path)
    return _validate(StudyConfig, data, path)
