"""Exception hierarchy.

``ValidationError`` subclasses signal bad input (CLI exit code 2); anything
else deriving from ``GroupBiasError`` is a runtime failure (exit code 3).
"""

from typing import Optional


class GroupBiasError(Exception):
    """Base class for all package errors."""


class GroupBiasWarning(UserWarning):
    """Non-fatal condition worth surfacing (small groups, fallback weights)."""


class ValidationError(GroupBiasError, ValueError):
    """Input data or configuration failed validation."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


# --- ingestion -----------------------------------------------------------


class MissingColumnError(ValidationError):
    pass


class NonBinaryTreatmentError(ValidationError):
    pass


class NegativeOutcomeOnRelativeScaleError(ValidationError):
    pass


class NonBinaryOutcomeError(NegativeOutcomeOnRelativeScaleError):
    """Relative-scale data must carry binary outcomes."""


class NonpositivePredictionError(ValidationError):
    pass


class UnparseableCellError(ValidationError):
    pass


class DegenerateScoreError(ValidationError):
    pass


class GroupTooSmallError(ValidationError):
    pass


# --- estimation ----------------------------------------------------------


class EmptyArmError(GroupBiasError):
    pass


class EmptySplitError(GroupBiasError):
    pass


class ZeroControlMeanError(GroupBiasError):
    pass


class RankDeficientDesignError(GroupBiasError):
    pass


class ZeroVarianceControlError(GroupBiasError):
    pass


class MissingBaselinePredictionError(ValidationError):
    pass


class NonpositiveBaselineError(ValidationError):
    pass


class NoPositiveOutcomesError(GroupBiasError):
    pass


class BootstrapDegenerateError(GroupBiasError):
    pass


class SingleGroupError(GroupBiasError):
    pass


# --- mitigation / evaluation --------------------------------------------


class InvalidAlphaError(ValidationError):
    pass


class UnknownGroupInPlanError(ValidationError):
    pass


class PlanHalfLeakageError(GroupBiasError):
    pass


# --- calibration ---------------------------------------------------------


class TooFewGroupsError(ValidationError):
    pass


class NonpositiveGateForLogFamilyError(ValidationError):
    pass


class ZeroWeightError(ValidationError):
    pass


# --- targeting / simulation ---------------------------------------------


class NonpositiveSigmaError(ValidationError):
    pass


class DegeneratePropensityError(ValidationError):
    pass


class SampleTooLargeError(ValidationError):
    pass


class InvalidDistributionParamsError(ValidationError):
    pass
