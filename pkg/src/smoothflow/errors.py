"""Shared exception types and pipeline stage labels."""

from __future__ import annotations

# Pipeline stages, in the order they run during a model fit / generation.
STAGES = ("ingest", "fit-field", "scores", "surface", "nu", "sample", "integrate")


class SmoothflowError(Exception):
    """Base class for all library errors."""


class ValidationError(SmoothflowError):
    """Bad inputs: malformed files, out-of-range parameters, empty data."""


class NumericalError(SmoothflowError):
    """Numerical failure: singular designs, factorization failures, non-finite states."""


class StageError(SmoothflowError):
    """A pipeline failure tagged with the stage where it happened."""

    def __init__(self, stage: str, message: str):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
