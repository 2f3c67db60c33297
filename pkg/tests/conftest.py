"""Configuration for pytest."""

import logging
from collections.abc import Callable, Generator
from pathlib import Path

import numpy as np
import pytest
from scipy import special

from GFormulaLib.config.settings import DgpConfig
from GFormulaLib.models.data_classes import ClusterRecord, HouseholdPoint, Individual, Stratum
from GFormulaLib.sim.dgp import generate_dataset


@pytest.fixture(autouse=True)
def caplog_for_loguru(caplog: pytest.LogCaptureFixture) -> Generator[pytest.LogCaptureFixture, None, None]:
    """Fixture to configure Loguru to propagate to caplog."""
    from loguru import logger

    class PropagateHandler(logging.Handler):
        def emit(self, record: logging.LogRecord) -> None:
            logging.getLogger(record.name).handle(record)

    handler_id = logger.add(PropagateHandler(), format="{message}")
    yield caplog
    try:
        logger.remove(handler_id)
    except ValueError:
        # setup_logger() already removed every handler
        pass


@pytest.fixture(scope="session")
def simulated_records() -> list[ClusterRecord]:
    """One replicate of the default simulation law (m = 250)."""
    return generate_dataset(DgpConfig(m=250), 0)


def make_strata_records(m: int = 150, seed: int = 7) -> list[ClusterRecord]:
    """Clusters with a second stratum whose treatment share shifts the first stratum's."""
    rng = np.random.default_rng(seed)
    records: list[ClusterRecord] = []
    for i in range(m):
        n = int(rng.integers(3, 9))
        n2 = int(rng.integers(2, 6))
        x = float(rng.normal(0.0, 1.0))
        t2 = int(rng.binomial(n2, special.expit(0.1 + 0.3 * x)))
        t1 = int(rng.binomial(n, special.expit(-0.2 + 0.4 * x + 0.8 * t2 / n2)))
        events = int(rng.binomial(n, special.expit(0.3 - 0.2 * x - 0.7 * t1 / n - 0.4 * t2 / n2)))
        records.append(ClusterRecord(id=i, n=n, covariates=(x,), s=t1 / n, y=events / n, y_denominator=n, s2=t2 / n2, n2=n2))
    return records


@pytest.fixture(scope="session")
def strata_records() -> list[ClusterRecord]:
    return make_strata_records()


def make_households(n_villages: int = 40, seed: int = 3) -> list[HouseholdPoint]:
    """Villages one degree of latitude apart, each with a few households within a few hundred metres."""
    rng = np.random.default_rng(seed)
    households: list[HouseholdPoint] = []
    for v in range(n_villages):
        lat0, lon0 = -30.0 + v, 20.0 + 0.5 * (v % 3)
        age_shift = float(rng.normal(0.0, 1.0))
        for h in range(int(rng.integers(3, 6))):
            members: list[Individual] = []
            for _ in range(int(rng.integers(2, 5))):
                age = float(rng.normal(30.0 + 3.0 * age_shift, 5.0))
                treated = bool(rng.random() < special.expit(0.3 + 0.2 * age_shift))
                outcome = bool(rng.random() < special.expit(-0.2 - 0.5 * treated))
                members.append(Individual(stratum=Stratum.CHILD, treated=treated, outcome=outcome, covariates={"age": age}))
            members.append(Individual(stratum=Stratum.OTHER, treated=bool(rng.random() < 0.5), outcome=None, covariates={"age": 45.0}))
            households.append(
                HouseholdPoint(
                    household_id=f"v{v:02d}h{h}",
                    lat=lat0 + float(rng.uniform(-0.002, 0.002)),
                    lon=lon0 + float(rng.uniform(-0.002, 0.002)),
                    members=tuple(members),
                )
            )
    return households


def write_individuals_csv(path: Path, households: list[HouseholdPoint]) -> Path:
    lines = ["household_id,lat,lon,stratum,treated,outcome,age"]
    for point in households:
        for person in point.members:
            outcome = "" if person.outcome is None else str(int(person.outcome))
            lines.append(
                f"{point.household_id},{point.lat!r},{point.lon!r},{person.stratum.value},{int(person.treated)},{outcome},{person.covariates['age']!r}"
            )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_cluster_csv(path: Path, records: list[ClusterRecord], covariate_names: tuple[str, ...] = ("L1", "L2")) -> Path:
    lines = [",".join(["id", "n", "s", "y", "y_denominator", *covariate_names])]
    for r in records:
        lines.append(",".join([str(r.id), str(r.n), repr(r.s), repr(r.y), str(r.y_denominator), *(repr(c) for c in r.covariates)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def cluster_csv(tmp_path: Path, simulated_records: list[ClusterRecord]) -> Path:
    return write_cluster_csv(tmp_path / "clusters.csv", simulated_records)


@pytest.fixture
def individuals_csv(tmp_path: Path) -> Path:
    return write_individuals_csv(tmp_path / "individuals.csv", make_households())


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[[str], Path]:
    def _write(text: str, name: str = "analysis.toml") -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write
