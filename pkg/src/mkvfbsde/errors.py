"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, bad parameter values, bad config file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        self.message = message
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UsageError(ValueError):
    """An API was called in a way its contract forbids."""


class DivergenceError(RuntimeError):
    """A simulated state, loss or gradient became non-finite.

    ``iteration`` and ``step`` locate the failure when known. Inner code
    usually knows only the step; the training loop fills in the iteration
    with :meth:`locate` before recording the run as diverged ("DV").
    """

    def __init__(self, reason: str, iteration: int | None = None, step: int | None = None):
        super().__init__(reason)
        self.reason = reason
        self.iteration = iteration
        self.step = step

    def locate(self, iteration: int | None = None, step: int | None = None) -> "DivergenceError":
        if self.iteration is None:
            self.iteration = iteration
        if self.step is None:
            self.step = step
        return self

    def __str__(self) -> str:
        where = []
        if self.iteration is not None:
            where.append(f"iteration {self.iteration}")
        if self.step is not None:
            where.append(f"time step {self.step}")
        if not where:
            return self.reason
        return f"{self.reason} ({', '.join(where)})"


class DomainError(DivergenceError):
    """Coefficient evaluated outside its domain, e.g. log of a nonpositive state."""
