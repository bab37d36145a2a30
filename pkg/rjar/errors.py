"""
Exception hierarchy for the inference library.

Every error carries a stable ``reason`` code; the CLI prints it on standard
error so callers can branch on it without parsing messages.
"""

from typing import Optional


class RJARError(Exception):
    """Base class for all library errors."""

    reason = "ERROR"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def to_dict(self) -> dict:
        return {"reason": self.reason, "message": self.message}


class SchemaError(RJARError):
    reason = "SCHEMA"


class ParseError(RJARError):
    """A cell could not be read as a finite number."""

    reason = "PARSE"

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column

    def to_dict(self) -> dict:
        data = super().to_dict()
        data["row"] = self.row
        data["column"] = self.column
        return data


class DimensionError(RJARError):
    reason = "DIMENSION"


class DomainError(RJARError):
    reason = "DOMAIN"


class DegenerateInstrumentsError(RJARError):
    reason = "DEGENERATE_INSTRUMENTS"


class ZeroRankError(RJARError):
    reason = "ZERO_RANK"


class ResourceError(RJARError):
    reason = "RESOURCE"


class DiagonalProjectionError(RJARError):
    reason = "DIAGONAL_PROJECTION"


class DegenerateVarianceError(RJARError):
    reason = "DEGENERATE_VARIANCE"


class BalancedDesignError(RJARError):
    reason = "BALANCED_DESIGN"


class NotApplicableError(RJARError):
    reason = "NOT_APPLICABLE"


class DegenerateColumnError(RJARError):
    reason = "DEGENERATE_COLUMN"


class DegenerateSignalError(RJARError):
    reason = "DEGENERATE_SIGNAL"
