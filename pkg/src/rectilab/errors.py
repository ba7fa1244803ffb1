"""Exception types shared across the toolkit.

Every refusal carries enough context to be reported verbatim by the CLI.
"""


class ToolkitError(Exception):
    """Base class for all refusals raised by rectilab operations."""


class ResolutionLimit(ToolkitError):
    """A requested scale underflows what float64 geometry can represent."""


class BudgetExceeded(ToolkitError):
    """An enumeration (IFS words, grid cells) would exceed its hard budget."""


class SelectionFailure(ToolkitError):
    """A greedy search ended without an admissible result.

    ``detail`` names the first inequality or constraint that could not be
    met, with its evaluated sides when available.
    """

    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail or {}


class ClearanceFailure(ToolkitError):
    """No candidate projection center kept the required point clearance."""


class ConeConditionViolation(ToolkitError):
    """A curve fails the aperture condition needed for a shadow check."""


class ValidationError(ToolkitError):
    """A config document or CLI argument failed validation."""
