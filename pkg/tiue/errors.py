class TiUEError(Exception):
    """
    Base class of every error raised by this package.
    `exit_code` is what the command line returns when the error escapes a subcommand.
    """
    exit_code: int = 1


class ConfigError(TiUEError):
    exit_code = 2


class CheckpointError(TiUEError):
    exit_code = 3


class Corrupt(CheckpointError):
    pass


class VersionUnsupported(CheckpointError):
    pass


# tensor-core
class ShapeMismatch(TiUEError):
    pass


class InvalidAttr(TiUEError):
    pass


class NotScalar(TiUEError):
    pass


class DecayOutOfRange(TiUEError):
    pass


# schedule / sampler
class InvalidRange(TiUEError):
    pass


class InvalidTimestep(TiUEError):
    pass


class InvalidK(TiUEError):
    pass


class InvalidSteps(TiUEError):
    pass


class InvalidPlan(TiUEError):
    pass


class DimMismatch(TiUEError):
    pass


# unet / distill
class CacheMismatch(TiUEError):
    pass


class TargetMissing(TiUEError):
    pass


class NonFinite(TiUEError):
    pass


class EmptyDataset(TiUEError):
    pass


# data
class InvalidSpec(TiUEError):
    pass


class UnknownClass(TiUEError):
    pass


# metrics
class RankDeficient(TiUEError):
    pass


class KTooLarge(TiUEError):
    pass
