from __future__ import annotations

import typing as t


class LabError(Exception):
    """Base class for every error raised by the lab."""


class DomainError(LabError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class RangeError(LabError, ValueError):
    """An inverse could not be bracketed."""


class GridMismatchError(LabError, ValueError):
    pass


class InvalidNonlinearityError(LabError, ValueError):
    pass


class ConditionError(LabError):
    """A required analytic condition does not hold for the given inputs."""


class NumericalError(LabError, RuntimeError):
    def __init__(self: t.Self, msg: str, diagnostics: dict[str, t.Any] | None = None) -> None:
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


class NonConvergenceError(NumericalError):
    def __init__(
        self: t.Self,
        msg: str,
        history: list[float] | None = None,
        diagnostics: dict[str, t.Any] | None = None,
    ) -> None:
        super().__init__(msg, diagnostics)
        self.history = history or []


class HorizonError(NumericalError):
    pass


class TruncationError(NumericalError):
    pass


class ConstructionError(NumericalError):
    pass
