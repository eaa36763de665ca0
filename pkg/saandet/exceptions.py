from __future__ import annotations

from pathlib import Path


class SaanError(Exception):
    """Base class for all errors raised by saandet

    ``exit_code`` is what the command line entry point exits with when the error reaches it.
    """

    exit_code: int = 3


class ConfigError(SaanError):
    exit_code = 1


class DataError(SaanError):
    exit_code = 2


class GeometryError(DataError, ValueError):
    """A box or crop window violates its geometric invariants"""


class ShapeError(SaanError, ValueError):
    """A tensor does not have the shape an operation expects"""


class RuntimeFailure(SaanError):
    exit_code = 3


class AnnotationParseError(DataError):
    def __init__(self, path: Path | str, line: int | None, reason: str):
        self.path = Path(path)
        self.line = line
        self.reason = reason
        location = f"{self.path}:{line}" if line is not None else str(self.path)
        super().__init__(f"{location}: {reason}")


class InfeasibleBudgetError(DataError):
    def __init__(self, class_name: str, reason: str):
        self.class_name = class_name
        super().__init__(f"shot budget infeasible for class '{class_name}': {reason}")
