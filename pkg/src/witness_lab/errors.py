"""Exception hierarchy shared across the package."""

from __future__ import annotations

from typing import Any


class WitnessLabError(Exception):
    """Base class for all package errors."""

    code = "error"

    def to_dict(self) -> dict[str, Any]:
        return {"error": self.code, "message": str(self)}


class StructureError(WitnessLabError):
    """Dimension or structure mismatch between models, policies or classes."""

    code = "structure"


class ModelValidationError(WitnessLabError):
    """One or more model invariants are violated.

    ``issues`` holds one dict per violation with keys ``kind``, ``message``
    and (when applicable) ``h``, ``x``, ``a``.
    """

    code = "validation"

    def __init__(self, issues: list[dict[str, Any]]):
        self.issues = issues
        first = issues[0]
        loc = ", ".join(f"{k}={first[k]}" for k in ("h", "x", "a") if k in first)
        super().__init__(f"{first['message']} at ({loc})" + (f" (+{len(issues) - 1} more)" if len(issues) > 1 else ""))

    def to_dict(self) -> dict[str, Any]:
        return {"error": self.code, "message": str(self), "issues": self.issues}


class CapacityError(WitnessLabError):
    code = "capacity"


class InconsistencyError(WitnessLabError):
    """An internal identity that must hold exactly did not."""

    code = "inconsistency"

    def __init__(self, message: str, record: Any = None):
        super().__init__(message)
        self.record = record


class VersionSpaceEmptyError(WitnessLabError):
    """Every model was eliminated; usually a mis-set elimination threshold."""

    code = "empty_version_space"

    def __init__(self, message: str, record: Any = None):
        super().__init__(message)
        self.record = record


class BudgetExceededError(WitnessLabError):
    code = "budget"

    def __init__(self, message: str, record: Any = None):
        super().__init__(message)
        self.record = record


class ConfigError(WitnessLabError):
    code = "config"
