"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ``ValidationError`` subclasses exit 1,
``TransportError`` subclasses exit 2, anything else exits 3.
"""

from __future__ import annotations


class EgfrLmmError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(EgfrLmmError):
    """Input data or configuration violates a documented contract."""


class ParseError(ValidationError):
    """A row of an input file could not be parsed."""

    def __init__(self, message: str, row: int | None = None, field: str | None = None):
        self.row = row
        self.field = field
        where = []
        if row is not None:
            where.append(f"row {row}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DuplicateVisitError(ValidationError):
    pass


class EmptyCohortError(ValidationError):
    pass


class ConfigError(ValidationError):
    """Bad configuration value. ``line`` points into the config file when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SplitError(ValidationError):
    pass


class RenderError(ValidationError):
    pass


class TemplateError(ValidationError):
    pass


class PolicyError(ValidationError):
    """A mock policy cannot produce an answer, or an offline run tried to use the network."""


class OfflineViolation(PolicyError):
    pass


class ReplayError(ValidationError):
    def __init__(self, key: str, message: str | None = None):
        self.key = key
        super().__init__(message or f"cache miss during replay: {key}")


class StageOrderError(ValidationError):
    pass


class MetricError(ValidationError):
    pass


class PairingError(ValidationError):
    pass


class ReportError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class TrainingError(EgfrLmmError):
    pass


class TransportError(EgfrLmmError):
    """A remote request failed after exhausting its retries."""


class CredentialError(TransportError):
    """Missing or rejected credentials. Never retried."""
