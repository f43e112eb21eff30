from typing import Optional, Sequence


class DtrError(Exception):
    """Base error. `exit_code` is what the CLI returns when this escapes a command."""

    exit_code = 5
    module = "internal"

    def __init__(self, detail: str, module: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        if module:
            self.module = module

    def __str__(self) -> str:
        return f"[{self.module}] {self.detail}"


# Configuration / parse errors
class ConfigError(DtrError):
    exit_code = 2
    module = "config"


class FormulaSyntaxError(ConfigError):
    module = "tabledesign"

    def __init__(self, detail: str, offset: int):
        super().__init__(f"{detail} (at byte {offset})")
        self.offset = offset


class EmptyFormulaError(ConfigError):
    module = "tabledesign"


class DuplicateTermError(ConfigError):
    module = "tabledesign"


# Data errors
class DataError(DtrError):
    exit_code = 3
    module = "data"


class IngestionError(DataError):
    def __init__(self, detail: str, row: Optional[int] = None, column: Optional[str] = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{detail}{suffix}")
        self.row = row
        self.column = column


class UnknownColumnError(DataError):
    module = "tabledesign"

    def __init__(self, name: str, available: Sequence[str] = ()):
        hint = f"; available: {', '.join(available)}" if available else ""
        super().__init__(f"unknown column '{name}'{hint}")
        self.name = name


class MissingCovariateError(DataError):
    module = "recommend"


class PreconditionError(DataError):
    pass


# Numerical errors
class NumericalError(DtrError):
    exit_code = 4
    module = "regress"


class RankDeficiencyError(NumericalError):
    def __init__(self, collinear: Sequence[str], rcond: float):
        super().__init__(
            f"design is rank deficient (reciprocal condition {rcond:.3g}); "
            f"collinear terms: {', '.join(collinear) or 'unknown'}"
        )
        self.collinear = list(collinear)


class ConvergenceError(NumericalError):
    def __init__(self, detail: str, trace: Sequence[float] = (), module: Optional[str] = None):
        if trace:
            detail = f"{detail}; last steps: {', '.join(f'{t:.3g}' for t in list(trace)[-5:])}"
        super().__init__(detail, module)
        self.trace = list(trace)


class SeparationError(NumericalError):
    pass


class SingularCovarianceError(NumericalError):
    module = "calibration"


class DegenerateErrorEstimateError(NumericalError):
    module = "calibration"


class BootstrapAbortedError(NumericalError):
    module = "mnboot"
