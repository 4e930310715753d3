"""Exception hierarchy shared by every module.

Each class carries ``exit_code`` so the CLI can map failures onto its
documented exit codes (2 = validation, 3 = runtime).
"""


class StraightenError(Exception):
    exit_code = 3


class ValidationError(StraightenError):
    exit_code = 2


# file formats
class BadMagic(ValidationError):
    pass


class TruncatedFile(ValidationError):
    pass


class CountMismatch(ValidationError):
    pass


class ChecksumMismatch(ValidationError):
    pass


class VersionUnsupported(ValidationError):
    pass


class HeaderInconsistent(ValidationError):
    pass


class SpecMismatch(ValidationError):
    pass


class FileMissing(ValidationError):
    pass


class ConfigInvalid(ValidationError):
    pass


# data generation
class InvalidGeometry(ValidationError):
    pass


class InvalidRange(ValidationError):
    pass


# network / training
class ShapeMismatch(StraightenError):
    pass


class TraceReused(StraightenError):
    pass


class NonFiniteLoss(StraightenError):
    pass


class IndexOutOfRange(StraightenError):
    pass


# objectives / analysis
class DegenerateDifference(StraightenError):
    pass


class DegenerateCovariance(StraightenError):
    pass


class EmptyGroup(StraightenError):
    pass


# probes
class SingleClass(StraightenError):
    pass


class IllConditioned(StraightenError):
    pass


class AttributeMissing(StraightenError):
    pass
