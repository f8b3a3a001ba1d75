"""Error taxonomy shared across the package.

Every condition the pipeline can refuse has a named exception so callers (and
the CLI exit-code mapping) can distinguish data problems from fitting problems.
"""


class FusionError(Exception):
    """Base class for all package-specific errors."""


# --- dataset ---------------------------------------------------------------
class MissingColumn(FusionError):
    pass


class BadArmCode(FusionError):
    pass


class NonPositiveTime(FusionError):
    pass


class EmptyArm(FusionError):
    pass


class HorizonExceedsData(FusionError):
    pass


class AllBridgingDropped(FusionError):
    pass


# --- nuisance --------------------------------------------------------------
class CellTooSmall(FusionError):
    pass


class Separation(FusionError):
    pass


class RankDeficient(FusionError):
    pass


class TooFewRows(FusionError):
    pass


class NoEvents(FusionError):
    pass


class Nonconvergence(FusionError):
    pass


# --- eif / estimator -------------------------------------------------------
class NoBridgingRows(FusionError):
    pass


class NoArmRows(FusionError):
    pass


class NoHistoricalApprovedRows(FusionError):
    pass


class FoldMismatch(FusionError):
    pass


class CauseOutOfRange(FusionError):
    pass


class PositivityViolated(FusionError):
    pass


class GridBeyondHorizon(FusionError):
    pass


class DegenerateVariance(FusionError):
    pass


class DenominatorNearZero(FusionError):
    pass


class InsufficientEvents(FusionError):
    pass


class LowInformation(UserWarning):
    """Warning (not an error): estimation proceeded but with thin support."""
