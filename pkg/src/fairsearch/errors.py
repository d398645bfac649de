"""Shared exception types."""

from __future__ import annotations


class ParseError(Exception):
    """Malformed external input (document record, CSV row, model file).

    Carries the 1-based line number when the source is line oriented.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FeatureError(ValueError):
    """A requested feature cannot be extracted from a document."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or weight vector."""

    def __init__(self, iteration: int, detail: str = "loss is not finite"):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration
