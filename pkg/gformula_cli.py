#!/usr/bin/env python3
"""Command-line entry point for g-formula estimation under partial interference."""

from __future__ import annotations

import functools
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Any, ParamSpec

import click
import pandas as pd
from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn, TimeRemainingColumn
from rich.table import Table

from GFormulaLib import __version__
from GFormulaLib.config.settings import AnalysisConfig, StudyConfig, load_study_config
from GFormulaLib.core.pipeline import AnalysisRunner, run_analysis
from GFormulaLib.ingest.geo import cluster_households
from GFormulaLib.ingest.readers import read_individuals_csv
from GFormulaLib.models.data_classes import AnalysisStage, Linkage, OutcomeDefinition
from GFormulaLib.models.errors import EXIT_CONFIG_ERROR, ConfigError, GFormulaError, StageError
from GFormulaLib.sim.dgp import analytic_truths
from GFormulaLib.sim.study import run_study
from GFormulaLib.utils import file_system as fs
from GFormulaLib.utils.logging import get_logger, setup_logger

if TYPE_CHECKING:
    from collections.abc import Callable

    from loguru import Logger

    from GFormulaLib.models.data_classes import EstimateReport, SimStudyResult

console: Console = Console()
logger: Logger = get_logger(__name__)

LOG_FILE = "gformula.log"
EXIT_INTERRUPTED = 130


def _fmt(value: float | None, digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


P = ParamSpec("P")


def handle_errors(func: Callable[P, None]) -> Callable[P, None]:
    """Turns library errors into a console message and the matching exit code."""

    @functools.wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> None:
        try:
            func(*args, **kwargs)
        except KeyboardInterrupt:
            console.print("\n\n[yellow]Cancelled by user.[/yellow]")
            sys.exit(EXIT_INTERRUPTED)
        except StageError as e:
            console.print(f"\n[bold red]✗ Failed at stage {e.stage}:[/bold red] {e.cause}")
            sys.exit(e.exit_code)
        except GFormulaError as e:
            console.print(f"\n[bold red]Error:[/bold red] {e}")
            sys.exit(e.exit_code)
        except Exception as e:  # noqa: BLE001
            logger.exception(f"Unexpected error: {e}")
            console.print(f"\n[bold red]Unexpected error:[/bold red] {e}")
            sys.exit(1)

    return wrapper


def config_option(required: bool = True) -> Callable[[Callable[..., Any]], Callable[..., Any]]:
    return click.option(
        "--config",
        "-c",
        "config_path",
        required=required,
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        help="TOML/JSON configuration, or the manifest.json of a previous run",
    )


def analysis_options(func: Callable[..., Any]) -> Callable[..., Any]:
    func = click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), help="Override output.directory")(func)
    func = click.option("--threshold-km", type=float, help="Override the clustering threshold (km)")(func)
    func = click.option("--ordered-summation", is_flag=True, help="Sum cluster contributions in a fixed order")(func)
    func = click.option("--threads", type=int, help="Override run.threads")(func)
    func = click.option("--seed", type=int, help="Override run.seed")(func)
    return config_option()(func)


def show_estimates(report: EstimateReport) -> None:
    table = Table(title=f"Policy means ({report.outcome_def})")
    for column in ("alpha", "gamma0", "mu", "SE", "95% CI"):
        table.add_column(column, justify="right")
    for alpha, gamma, mu, se, lo, hi in zip(
        report.alpha_grid, report.gamma0, report.mu_hat, report.se_mu, report.mu_ci_lower, report.mu_ci_upper, strict=True
    ):
        table.add_row(f"{alpha:g}", _fmt(gamma), _fmt(mu), _fmt(se), f"({_fmt(lo)}, {_fmt(hi)})")
    console.print(table)

    if report.contrasts:
        contrasts = Table(title="Contrasts mu(alpha) - mu(alpha')")
        for column in ("alpha", "alpha'", "delta", "SE", "95% CI"):
            contrasts.add_column(column, justify="right")
        for (a, b), delta, se, lo, hi in zip(
            report.contrasts, report.delta_hat, report.se_delta, report.delta_ci_lower, report.delta_ci_upper, strict=True
        ):
            contrasts.add_row(f"{a:g}", f"{b:g}", _fmt(delta), _fmt(se), f"({_fmt(lo)}, {_fmt(hi)})")
        console.print(contrasts)


def show_study(result: SimStudyResult) -> None:
    table = Table(title=f"Simulation study ({result.outcome_def}): {result.replicates} replicates, {result.failures} excluded")
    for column in ("Estimator", "Truth", "Bias", "Cov %", "ASE", "ESE", "SER"):
        table.add_column(column, justify="right")
    for row in result.rows:
        table.add_row(row.estimator, _fmt(row.truth, 3), _fmt(row.bias, 4), f"{row.coverage:.1f}", _fmt(row.ase), _fmt(row.ese), _fmt(row.ser, 2))
    console.print(table)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="gformula")
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
@click.option("--quiet", "-q", is_flag=True, help="Only show warnings and errors on the console")
@click.option("--log-file", type=click.Path(dir_okay=False, path_type=Path), default=Path(LOG_FILE), show_default=True)
@click.pass_context
def cli(ctx: click.Context, verbose: bool, quiet: bool, log_file: Path) -> None:
    """Parametric g-formula estimation of policy effects under partial interference.

    Examples:
        gformula estimate --config analysis.toml
        gformula estimate --config gformula_output/manifest.json --threshold-km 5
        gformula -q simulate --outcome-def when_treated --replicates 200 --threads 4
        gformula truth --alpha 0.4 --alpha 0.5 --alpha 0.6
    """
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose
    setup_logger(log_file, verbose=verbose, quiet=quiet)


@cli.command()
@analysis_options
@handle_errors
def fit(config_path: Path, seed: int | None, threads: int | None, ordered_summation: bool, threshold_km: float | None, output_dir: Path | None) -> None:
    """Fit the treatment and outcome models only."""
    config = AnalysisConfig.from_cli_args(config_path, seed, threads, ordered_summation, threshold_km, output_dir)
    runner = AnalysisRunner(config)
    with console.status("Fitting models..."):
        outputs = runner.run(through=AnalysisStage.FIT)
    console.print(f"[cyan]{len(outputs.records)} clusters[/cyan]")
    table = Table(title="Fitted coefficients")
    table.add_column("Model")
    table.add_column("Coefficients", justify="right")
    table.add_column("Iterations", justify="right")
    table.add_column("Log-likelihood", justify="right")
    for name, summary in runner.manifest()["fits"].items():
        table.add_row(name, ", ".join(f"{c:.6g}" for c in summary["coefficients"]), str(summary["iterations"]), f"{summary['loglik']:.6g}")
    console.print(table)


@cli.command()
@analysis_options
@handle_errors
def estimate(config_path: Path, seed: int | None, threads: int | None, ordered_summation: bool, threshold_km: float | None, output_dir: Path | None) -> None:
    """Run the full analysis and write estimates.csv, contrasts.csv and manifest.json."""
    config = AnalysisConfig.from_cli_args(config_path, seed, threads, ordered_summation, threshold_km, output_dir)
    with console.status("Estimating..."):
        outputs = run_analysis(config)
    assert outputs.report is not None
    show_estimates(outputs.report)
    console.print(f"\n[bold green]✓ Results written to {config.output.directory}[/bold green]")


@cli.command()
@config_option(required=False)
@click.option(
    "--outcome-def",
    type=click.Choice([d.value for d in OutcomeDefinition], case_sensitive=False),
    help="Override the outcome definition of the data generating law",
)
@click.option("--replicates", "-n", type=int, help="Number of simulated data sets")
@click.option("--m", "clusters", type=int, help="Clusters per data set")
@click.option("--seed", type=int, help="Override the simulation seed")
@click.option("--threads", type=int, help="Worker processes")
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path), help="Write the summary table as CSV")
@handle_errors
def simulate(  # noqa: PLR0913
    config_path: Path | None,
    outcome_def: str | None,
    replicates: int | None,
    clusters: int | None,
    seed: int | None,
    threads: int | None,
    output: Path | None,
) -> None:
    """Run a simulation study and report bias, coverage, ASE, ESE and SER."""
    study = load_study_config(config_path) if config_path else StudyConfig()
    dgp_update = {k: v for k, v in {"outcome_def": outcome_def, "m": clusters, "seed": seed}.items() if v is not None}
    update = {k: v for k, v in {"replicates": replicates, "workers": threads, "output": output}.items() if v is not None}
    try:
        study = StudyConfig.model_validate({**study.model_dump(), **update, "dgp": {**study.dgp.model_dump(), **dgp_update}})
    except ValueError as e:
        raise ConfigError(f"Invalid simulation options: {e}") from e

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeRemainingColumn(),
        console=console,
    ) as progress:
        task = progress.add_task(f"Simulating ({study.dgp.outcome_def})", total=study.replicates)
        result = run_study(
            study.dgp,
            study.alphas,
            study.contrasts,
            study.replicates,
            workers=study.workers,
            progress=lambda done, _total: progress.update(task, completed=done),
        )
    show_study(result)
    if study.output is not None:
        fs.atomic_write_frame(study.output, result.to_frame())
        console.print(f"[green]✓ Summary written to {study.output}[/green]")


@cli.command("cluster-geo")
@config_option()
@click.option("--threshold-km", type=float, help="Override the clustering threshold (km)")
@click.option("--linkage", type=click.Choice([x.value for x in Linkage], case_sensitive=False), help="Override the linkage")
@click.option("--output", type=click.Path(dir_okay=False, path_type=Path), help="Assignment CSV (default: <output>/clusters.csv)")
@handle_errors
def cluster_geo(config_path: Path, threshold_km: float | None, linkage: str | None, output: Path | None) -> None:
    """Cluster households by distance and write the household -> cluster assignment."""
    config = AnalysisConfig.from_cli_args(config_path, threshold_km=threshold_km)
    if config.input.individuals_csv is None:
        raise ConfigError("cluster-geo needs input.individuals_csv")
    method = Linkage(linkage) if linkage else config.clustering.linkage
    points = read_individuals_csv(config.input.individuals_csv, config.model.covariates)
    assignment = cluster_households(points, config.clustering.threshold_km, method)

    frame = pd.DataFrame(sorted(assignment.items()), columns=["household_id", "cluster"])
    destination = output or config.output.directory / "clusters.csv"
    fs.atomic_write_frame(destination, frame)
    sizes = frame["cluster"].value_counts()
    console.print(
        f"[green]✓ {len(frame)} households in {len(sizes)} clusters "
        f"({method.value} linkage, {config.clustering.threshold_km:g} km; largest has {int(sizes.max())} households)[/green]"
    )
    console.print(f"[dim]Written to {destination}[/dim]")


@cli.command()
@config_option(required=False)
@click.option("--alpha", "alphas", type=float, multiple=True, help="Policy (repeatable); defaults to the study grid")
@click.option(
    "--outcome-def",
    type=click.Choice([d.value for d in OutcomeDefinition], case_sensitive=False),
    help="Override the outcome definition of the data generating law",
)
@handle_errors
def truth(config_path: Path | None, alphas: tuple[float, ...], outcome_def: str | None) -> None:
    """Print the exact policy means and contrasts implied by the data generating law."""
    study = load_study_config(config_path) if config_path else StudyConfig()
    dgp = study.dgp if outcome_def is None else study.dgp.model_copy(update={"outcome_def": OutcomeDefinition(outcome_def)})
    grid = list(alphas) or study.alphas
    contrasts = [(a, b) for a, b in study.contrasts if a in grid and b in grid]
    for alpha in grid:
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"--alpha must lie strictly inside (0, 1), got {alpha}")
    values = analytic_truths(dgp, grid, contrasts)

    table = Table(title=f"True values ({dgp.outcome_def})")
    table.add_column("Estimand")
    table.add_column("Value", justify="right")
    for label, value in values.items():
        table.add_row(label, f"{value:.6f}")
    console.print(table)


def main() -> None:
    try:
        cli.main(prog_name="gformula", standalone_mode=False)
    except click.exceptions.Abort:
        console.print("\n\n[yellow]Cancelled by user.[/yellow]")
        sys.exit(EXIT_INTERRUPTED)
    except click.ClickException as e:
        e.show()
        sys.exit(EXIT_CONFIG_ERROR)


if __name__ == "__main__":
    main()
