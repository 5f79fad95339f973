"""Exception hierarchy shared by all pipeline stages."""


class DSADLCError(Exception):
    """Base class for every error raised by this package."""


class NotFound(DSADLCError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class WindowUnderrun(DSADLCError):
    """Not enough trajectory history for the requested window."""


class SchemaError(DSADLCError):
    pass


class IntegrityError(DSADLCError):
    pass


class GenerationError(DSADLCError):
    pass


class ConfigError(DSADLCError, ValueError):
    pass


class ShapeError(DSADLCError, ValueError):
    pass


class TrainingDiverged(DSADLCError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite in epoch {epoch}")


class FormatError(DSADLCError):
    """Corrupt, truncated or version-mismatched binary file."""


class LengthMismatch(DSADLCError, ValueError):
    pass


class NonPositiveStartSpeed(DSADLCError, ValueError):
    pass


class MissingTrajectory(DSADLCError):
    pass
