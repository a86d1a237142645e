"""Exception hierarchy shared by every pipeline stage.

Each exception belongs to one of three families whose ``exit_code`` the CLI
returns: configuration problems (2), bad input data (3) and numerical
failures (4).
"""


class OptReconError(Exception):
    exit_code = 1


class ConfigError(OptReconError, ValueError):
    exit_code = 2


class DataError(OptReconError, ValueError):
    exit_code = 3


class NumericError(OptReconError, ArithmeticError):
    exit_code = 4


# geometry_calib
class AllPointsCoincident(NumericError):
    pass


class DegenerateCorners(NumericError):
    pass


class InsufficientConstraints(DataError):
    pass


class AmbiguousSolution(NumericError):
    pass


class NotPositiveDefinite(NumericError):
    pass


class InvalidElement(DataError):
    pass


class NonPositiveExtent(DataError):
    pass


# raw_ingest
class UnreadableFile(DataError):
    pass


class OddDimensions(DataError):
    pass


class SampleOutOfRange(DataError):
    pass


class DuplicateAngle(DataError):
    pass


class NonuniformSpacing(DataError):
    pass


class DimensionMismatch(DataError):
    pass


# attenuation
class MarginTooWide(DataError):
    pass


# tomo_recon
class RowOutOfRange(DataError):
    pass


class GeometryMissing(ConfigError):
    pass


class IncompleteScan(DataError):
    pass
