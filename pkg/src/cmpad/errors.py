"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, anything else -> 4.
"""


class CmpadError(Exception):
    """Base class for package-specific failures."""


class ConfigError(CmpadError):
    """Bad or inconsistent configuration (unknown key, invalid value)."""


class DataError(CmpadError):
    """Dataset problems: missing files, malformed manifests, bad shapes."""


class CheckpointError(CmpadError):
    """Checkpoint container problems."""


class BadCheckpointFormat(CheckpointError):
    pass


class CheckpointVersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class CheckpointShapeMismatch(CheckpointError):
    pass
