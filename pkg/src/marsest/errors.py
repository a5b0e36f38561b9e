"""Exception hierarchy.

Every error carries the module that raised it and a short machine-readable
rule name, so the CLI can turn any failure into a structured JSON body and
a stable exit code.
"""

from __future__ import annotations

from typing import Any


class MarsError(Exception):
    """Base class for all package errors."""

    exit_code = 1

    def __init__(self, message: str, *, module: str, rule: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.module = module
        self.rule = rule
        self.details = details

    def to_dict(self) -> dict[str, Any]:
        body: dict[str, Any] = {
            "error": type(self).__name__,
            "module": self.module,
            "rule": self.rule,
            "message": self.message,
            "exit_code": self.exit_code,
        }
        if self.details:
            body["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return body


class ConfigError(MarsError):
    exit_code = 2


class DataValidationError(MarsError):
    exit_code = 3


class NumericalError(MarsError):
    exit_code = 4


class EstimatorError(MarsError):
    exit_code = 5


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if hasattr(value, "item"):
        return value.item()
    return str(value)
