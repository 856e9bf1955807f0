class CogTrajError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(CogTrajError, ValueError):
    pass


class ParameterError(CogTrajError, ValueError):
    pass


class ConfigError(CogTrajError, ValueError):
    pass


class InputRangeError(CogTrajError, ValueError):
    pass


class ValidationError(CogTrajError, ValueError):
    """Bad data on disk: malformed tables, manifests, volumes."""


class VolumeFormatError(ValidationError):
    pass


class NonFiniteError(CogTrajError, FloatingPointError):
    pass


class CheckpointError(CogTrajError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
