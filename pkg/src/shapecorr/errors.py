"""Error hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to:
0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

from typing import Optional


class ShapeCorrError(Exception):
    exit_code = 2


class UsageError(ShapeCorrError, ValueError):
    exit_code = 1


class ConfigError(UsageError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DataError(ShapeCorrError, ValueError):
    exit_code = 2


class MeshParseError(DataError):
    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class DegenerateShapeError(DataError):
    pass


class OutOfBoundsError(DataError):
    pass


class ArchiveError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(ShapeCorrError, ArithmeticError):
    exit_code = 3


class UndefinedNormalError(NumericError):
    pass


class NonFiniteLossError(NumericError):
    def __init__(self, term: str, step: Optional[int] = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"loss term '{term}' is not finite{where}")
        self.term = term
        self.step = step
