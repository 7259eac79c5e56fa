"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`CtmaeError`.
The three intermediate classes map onto the CLI exit codes: configuration
problems exit with 2, bad input data with 3, anything else with 4.
"""


class CtmaeError(Exception):
    exit_code = 4


class ConfigError(CtmaeError):
    exit_code = 2


class DataError(CtmaeError):
    exit_code = 3


# -- volume io ---------------------------------------------------------------

class NiftiError(DataError):
    pass


class MissingMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class NonFiniteVoxel(NiftiError):
    pass


class MalformedHeader(NiftiError):
    pass


class IoFailure(NiftiError):
    pass


class DimMismatch(DataError):
    pass


# -- preprocess --------------------------------------------------------------

class EmptyManifest(DataError):
    pass


class DegenerateOutput(DataError):
    pass


class EmptyMask(DataError):
    pass


class BoxOutOfBounds(DataError):
    pass


class InvalidBounds(ConfigError):
    pass


class IndivisibleSide(ConfigError):
    pass


# -- patching / autodiff / model ---------------------------------------------

class ShapeMismatch(CtmaeError):
    pass


class BadRatio(ConfigError):
    pass


class HeadDivisibility(ConfigError):
    pass


class LabelOutOfRange(DataError):
    pass


class NonScalarLoss(CtmaeError):
    pass


class IndexOutOfRange(CtmaeError):
    pass


# -- training ----------------------------------------------------------------

class ZeroClassCount(DataError):
    pass


class NegativeAlpha(ConfigError):
    pass


class CheckpointError(CtmaeError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptChecksum(CheckpointError):
    pass
