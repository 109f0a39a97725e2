"""Exception hierarchy shared across the pipeline.

Every error carries an optional ``stage`` tag so the CLI can report which
pipeline stage failed and map the failure to an exit code.
"""
from __future__ import annotations


class VlogError(Exception):
    exit_code = 1

    def __init__(self, *args, stage: str | None = None):
        super().__init__(*args)
        self.stage = stage

    def with_stage(self, stage: str) -> "VlogError":
        if self.stage is None:
            self.stage = stage
        return self

    def __str__(self) -> str:
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ConfigError(VlogError):
    exit_code = 2


class BackendError(VlogError):
    exit_code = 3


class TransportError(BackendError):
    pass


class EmptyReply(BackendError):
    pass


class DimMismatch(BackendError):
    pass


class ParseError(BackendError):
    pass


class NumericalError(VlogError):
    exit_code = 4


class NonFiniteError(NumericalError):
    pass


class DomainError(VlogError, ValueError):
    exit_code = 2


class ShapeError(VlogError, ValueError):
    exit_code = 4


class StageOrderError(VlogError):
    exit_code = 2


class OrderError(VlogError):
    exit_code = 2
