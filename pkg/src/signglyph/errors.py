"""Exception hierarchy shared by every module.

The CLI maps each family onto its own exit status, so new errors should
subclass one of the three roots below rather than ``SignglyphError`` directly.
"""


class SignglyphError(Exception):
    exit_code = 1


class ConfigError(SignglyphError, ValueError):
    """Invalid parameters, inconsistent geometry, missing splits."""

    exit_code = 2


class ShapeError(ConfigError):
    """Array shapes that do not fit the operation."""


class DataError(SignglyphError):
    """Input data is present but unusable (corrupt image, bad checkpoint, bad CSV)."""

    exit_code = 4


class CorruptImageError(DataError):
    pass


class UnsupportedFormatError(DataError):
    pass


class ManifestError(DataError):
    pass


class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class IOFailure(SignglyphError, OSError):
    """Missing files and failed writes."""

    exit_code = 3


class ImageNotFoundError(IOFailure, FileNotFoundError):
    pass
