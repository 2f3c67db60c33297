"""CSV readers for individual-level and cluster-level input."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING

import pandas as pd

from GFormulaLib.models.data_classes import ClusterRecord, HouseholdPoint, Individual, OutcomeDefinition, Stratum
from GFormulaLib.models.errors import DataValidationError, IngestionError, SchemaError
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from loguru import Logger

logger: Logger = get_logger(__name__)

INDIVIDUAL_COLUMNS = ("household_id", "lat", "lon", "stratum", "treated", "outcome")
CLUSTER_COLUMNS = ("id", "n", "s", "y")
_TRUE = {"1", "true", "yes"}
_FALSE = {"0", "false", "no"}


def _read_frame(path: Path, required: Sequence[str]) -> pd.DataFrame:
    if not path.is_file():
        raise IngestionError(f"Input file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise IngestionError(f"Could not parse {path}: {e}") from e
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path.name} is missing required column(s): {', '.join(missing)}")
    return frame


def _line(index: int) -> int:
    # header is line 1
    return index + 2


def _number(raw: str, column: str, row: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise IngestionError(f"column '{column}' is not numeric: {raw!r}", row=row) from None
    if not math.isfinite(value):
        raise IngestionError(f"column '{column}' is not finite: {raw!r}", row=row)
    return value


def _flag(raw: str, column: str, row: int, allow_missing: bool = False) -> bool | None:
    token = raw.strip().lower()
    if token in _TRUE:
        return True
    if token in _FALSE:
        return False
    if allow_missing and token in {"", "na", "nan"}:
        return None
    raise IngestionError(f"column '{column}' must be 0/1, got {raw!r}", row=row)


def read_individuals_csv(path: Path, covariate_columns: Sequence[str] = ()) -> list[HouseholdPoint]:
    """
    Reads one row per individual and groups the rows into households.

    Required columns are household_id, lat, lon, stratum (child/other), treated (0/1) and
    outcome (0/1, empty when not measured), plus every configured covariate column.

    :param path: CSV file.
    :param covariate_columns: Numeric individual-level covariates to carry along.
    :return: Households in order of first appearance.
    :raises SchemaError: If a required column is missing.
    :raises IngestionError: On an invalid value, with the offending line number.
    """
    frame = _read_frame(path, [*INDIVIDUAL_COLUMNS, *covariate_columns])
    households: dict[str, tuple[float, float, list[Individual]]] = {}
    for index, values in enumerate(frame.to_dict(orient="records")):
        line = _line(index)
        household_id = values["household_id"].strip()
        if not household_id:
            raise IngestionError("empty household_id", row=line)
        lat = _number(values["lat"], "lat", line)
        lon = _number(values["lon"], "lon", line)
        if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
            raise IngestionError(f"coordinates ({lat}, {lon}) out of range", row=line)
        try:
            stratum = Stratum(values["stratum"].strip().lower())
        except ValueError:
            raise IngestionError(f"stratum must be 'child' or 'other', got {values['stratum']!r}", row=line) from None
        individual = Individual(
            stratum=stratum,
            treated=bool(_flag(values["treated"], "treated", line)),
            outcome=_flag(values["outcome"], "outcome", line, allow_missing=True),
            covariates={c: _number(values[c], c, line) for c in covariate_columns},
        )
        if household_id in households:
            h_lat, h_lon, members = households[household_id]
            if (h_lat, h_lon) != (lat, lon):
                raise IngestionError(f"household {household_id} has inconsistent coordinates", row=line)
            members.append(individual)
        else:
            households[household_id] = (lat, lon, [individual])

    logger.info(f"Read {len(frame)} individuals in {len(households)} households from {path.name}")
    return [HouseholdPoint(household_id=hid, lat=lat, lon=lon, members=tuple(members)) for hid, (lat, lon, members) in households.items()]


def read_cluster_csv(path: Path, covariate_columns: Sequence[str], outcome_def: OutcomeDefinition) -> list[ClusterRecord]:
    """
    Reads pre-aggregated clusters (columns id, n, s, y, the covariates, and optionally
    y_denominator, s2 and n2). A missing y_denominator is derived from ``outcome_def``.

    :raises SchemaError: If a required column is missing.
    :raises IngestionError: If a row is not a valid cluster record.
    """
    frame = _read_frame(path, [*CLUSTER_COLUMNS, *covariate_columns])
    has_denominator = "y_denominator" in frame.columns
    has_strata = "s2" in frame.columns and "n2" in frame.columns
    records: list[ClusterRecord] = []
    for index, values in enumerate(frame.to_dict(orient="records")):
        line = _line(index)
        n_value = _number(values["n"], "n", line)
        if n_value != int(n_value):
            raise IngestionError(f"cluster size must be an integer, got {values['n']!r}", row=line)
        n = int(n_value)
        s = _number(values["s"], "s", line)
        denominator = int(_number(values["y_denominator"], "y_denominator", line)) if has_denominator else outcome_def.denominator(n, s)
        strata: dict[str, float | int] = {}
        if has_strata and values["s2"].strip() and values["n2"].strip():
            strata = {"s2": _number(values["s2"], "s2", line), "n2": int(_number(values["n2"], "n2", line))}
        try:
            records.append(
                ClusterRecord(
                    id=values["id"].strip(),
                    n=n,
                    covariates=tuple(_number(values[c], c, line) for c in covariate_columns),
                    s=s,
                    y=_number(values["y"], "y", line),
                    y_denominator=denominator,
                    **strata,  # type: ignore[arg-type]
                )
            )
        except DataValidationError as e:
            raise IngestionError(str(e), row=line) from e
    logger.info(f"Read {len(records)} cluster records from {path.name}")
    return records
