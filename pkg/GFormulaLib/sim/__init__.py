"""Simulation studies: data generation, analytic truths and Monte Carlo summaries."""

from .dgp import analytic_truth, analytic_truths, generate_dataset
from .study import run_study

__all__ = ["analytic_truth", "analytic_truths", "generate_dataset", "run_study"]
