"""Tests for the CSV readers."""

from pathlib import Path

import pytest

from GFormulaLib.ingest.readers import read_cluster_csv, read_individuals_csv
from GFormulaLib.models.data_classes import ClusterRecord, OutcomeDefinition, Stratum
from GFormulaLib.models.errors import IngestionError, SchemaError


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


class TestReadIndividualsCsv:
    """Test read_individuals_csv."""

    def test_groups_rows_into_households(self, tmp_path: Path) -> None:
        """Test members are grouped by household in order of first appearance."""
        path = _write(
            tmp_path / "people.csv",
            "household_id,lat,lon,stratum,treated,outcome,age\n"
            "h2,1.5,2.5,child,1,0,4\n"
            "h1,-3.0,10.0,CHILD,no,yes,6\n"
            "h2,1.5,2.5,other,0,,35\n",
        )
        households = read_individuals_csv(path, ["age"])
        assert [h.household_id for h in households] == ["h2", "h1"]
        h2 = households[0]
        assert (h2.lat, h2.lon) == (1.5, 2.5)
        assert [m.stratum for m in h2.members] == [Stratum.CHILD, Stratum.OTHER]
        assert h2.members[0].treated is True
        assert h2.members[1].outcome is None
        assert h2.members[1].covariates == {"age": 35.0}
        assert households[1].members[0].outcome is True

    def test_reads_generated_file(self, individuals_csv: Path) -> None:
        """Test the fixture file round-trips into households with children and others."""
        households = read_individuals_csv(individuals_csv, ["age"])
        assert len(households) > 40
        assert all(any(m.stratum is Stratum.OTHER for m in h.members) for h in households)

    def test_missing_column(self, tmp_path: Path) -> None:
        """Test a missing required or covariate column is a schema error."""
        path = _write(tmp_path / "people.csv", "household_id,lat,lon,stratum,treated\nh1,0,0,child,1\n")
        with pytest.raises(SchemaError, match="outcome"):
            read_individuals_csv(path)
        path = _write(tmp_path / "people2.csv", "household_id,lat,lon,stratum,treated,outcome\nh1,0,0,child,1,0\n")
        with pytest.raises(SchemaError, match="age"):
            read_individuals_csv(path, ["age"])

    @pytest.mark.parametrize(
        ("row", "message"),
        [
            ("h1,abc,0,child,1,0", "not numeric"),
            ("h1,95,0,child,1,0", "out of range"),
            ("h1,0,0,adult,1,0", "stratum"),
            ("h1,0,0,child,2,0", "0/1"),
            (",0,0,child,1,0", "household_id"),
        ],
    )
    def test_invalid_values_report_the_line(self, tmp_path: Path, row: str, message: str) -> None:
        """Test a bad value names its CSV line."""
        path = _write(tmp_path / "people.csv", f"household_id,lat,lon,stratum,treated,outcome\nh0,0,0,child,1,0\n{row}\n")
        with pytest.raises(IngestionError, match=message) as excinfo:
            read_individuals_csv(path)
        assert excinfo.value.row == 3
        assert str(excinfo.value).startswith("row 3:")

    def test_inconsistent_household_coordinates(self, tmp_path: Path) -> None:
        """Test one household cannot sit at two places."""
        path = _write(tmp_path / "people.csv", "household_id,lat,lon,stratum,treated,outcome\nh1,0,0,child,1,0\nh1,0,1,child,0,1\n")
        with pytest.raises(IngestionError, match="inconsistent coordinates"):
            read_individuals_csv(path)

    def test_missing_file(self, tmp_path: Path) -> None:
        """Test a path that does not exist."""
        with pytest.raises(IngestionError, match="not found"):
            read_individuals_csv(tmp_path / "absent.csv")


class TestReadClusterCsv:
    """Test read_cluster_csv."""

    def test_reads_written_records(self, cluster_csv: Path, simulated_records: list[ClusterRecord]) -> None:
        """Test the cluster fixture file reproduces the simulated records."""
        records = read_cluster_csv(cluster_csv, ["L1", "L2"], OutcomeDefinition.OVERALL)
        assert len(records) == len(simulated_records)
        first, expected = records[0], simulated_records[0]
        assert (first.n, first.s, first.y, first.y_denominator) == (expected.n, expected.s, expected.y, expected.y_denominator)
        assert first.covariates == expected.covariates
        assert first.id == str(expected.id)

    @pytest.mark.parametrize(
        ("outcome_def", "denominator"),
        [(OutcomeDefinition.OVERALL, 4), (OutcomeDefinition.WHEN_TREATED, 1), (OutcomeDefinition.WHEN_UNTREATED, 3)],
    )
    def test_denominator_derived_from_definition(self, tmp_path: Path, outcome_def: OutcomeDefinition, denominator: int) -> None:
        """Test a missing y_denominator column follows the outcome definition."""
        path = _write(tmp_path / "clusters.csv", "id,n,s,y,x\nc1,4,0.25,0,1.5\n")
        (record,) = read_cluster_csv(path, ["x"], outcome_def)
        assert record.y_denominator == denominator

    def test_strata_columns(self, tmp_path: Path) -> None:
        """Test s2 and n2 are read when present."""
        path = _write(tmp_path / "clusters.csv", "id,n,s,y,s2,n2\nc1,4,0.5,0.25,0.5,2\nc2,2,0,1,,\n")
        first, second = read_cluster_csv(path, [], OutcomeDefinition.OVERALL)
        assert (first.s2, first.n2) == (0.5, 2)
        assert first.has_strata
        assert not second.has_strata

    @pytest.mark.parametrize(
        ("row", "message"),
        [("c1,2.5,0,0", "integer"), ("c1,4,0.3,0", "not an integer count"), ("c1,4,0.5,inf", "not finite"), ("c1,0,0,0", "size")],
    )
    def test_invalid_records(self, tmp_path: Path, row: str, message: str) -> None:
        """Test invalid cluster rows name their CSV line."""
        path = _write(tmp_path / "clusters.csv", f"id,n,s,y\n{row}\n")
        with pytest.raises(IngestionError, match=message) as excinfo:
            read_cluster_csv(path, [], OutcomeDefinition.OVERALL)
        assert excinfo.value.row == 2

    def test_missing_required_column(self, tmp_path: Path) -> None:
        """Test the schema check lists the missing columns."""
        path = _write(tmp_path / "clusters.csv", "id,n,y\nc1,4,0\n")
        with pytest.raises(SchemaError, match="s"):
            read_cluster_csv(path, [], OutcomeDefinition.OVERALL)

    def test_unparseable_file(self, tmp_path: Path) -> None:
        """Test an empty file is an ingestion error."""
        path = _write(tmp_path / "clusters.csv", "")
        with pytest.raises(IngestionError, match="Could not parse"):
            read_cluster_csv(path, [], OutcomeDefinition.OVERALL)
