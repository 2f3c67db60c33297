"""Exception hierarchy shared by the library and the command-line tool."""

from __future__ import annotations

EXIT_DATA_ERROR = 2
EXIT_CONVERGENCE_FAILURE = 3
EXIT_CONFIG_ERROR = 4


class GFormulaError(Exception):
    """Base class for every error raised on purpose by GFormulaLib."""

    exit_code: int = 1


class DataValidationError(GFormulaError, ValueError):
    exit_code = EXIT_DATA_ERROR


class SchemaError(GFormulaError):
    exit_code = EXIT_DATA_ERROR


class IngestionError(GFormulaError):
    exit_code = EXIT_DATA_ERROR

    def __init__(self, message: str, row: int | None = None) -> None:
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class EmptyDatasetError(GFormulaError):
    exit_code = EXIT_DATA_ERROR


class SingularDesignError(GFormulaError):
    exit_code = EXIT_DATA_ERROR


class EmptyLikelihoodError(GFormulaError):
    exit_code = EXIT_DATA_ERROR


class ConvergenceError(GFormulaError):
    exit_code = EXIT_CONVERGENCE_FAILURE


class UnsolvablePolicyError(GFormulaError):
    exit_code = EXIT_CONVERGENCE_FAILURE


class PolicyStateError(GFormulaError):
    exit_code = EXIT_CONVERGENCE_FAILURE


class SingularInformationError(GFormulaError):
    exit_code = EXIT_CONVERGENCE_FAILURE

    def __init__(self, message: str, block: str | None = None, condition_number: float | None = None) -> None:
        self.block = block
        self.condition_number = condition_number
        super().__init__(f"{message} (offending block: {block})" if block else message)


class StudyAbortedError(GFormulaError):
    exit_code = EXIT_CONVERGENCE_FAILURE


class ConfigError(GFormulaError):
    exit_code = EXIT_CONFIG_ERROR


class StageError(GFormulaError):
    """Wraps an error with the pipeline stage that raised it."""

    def __init__(self, stage: object, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code if isinstance(cause, GFormulaError) else 1
        super().__init__(f"[{stage}] {cause}")
