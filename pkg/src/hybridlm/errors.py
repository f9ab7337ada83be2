"""Exception types shared across the package.

Every error raised on a contract violation is a subclass of ValueError so
callers can catch broadly, but the concrete classes stay distinguishable
for tests and the CLI exit-code mapping.
"""


class ShapeError(ValueError):
    """Operand dimensions are inconsistent with the operation."""


class EmptyInputError(ValueError):
    """An operation received an empty sequence/selection it cannot handle."""


class ConfigError(ValueError):
    """A configuration value violates a named constraint."""


class InputError(ValueError):
    """Invalid runtime input (e.g. out-of-vocabulary token id)."""


class DegenerateWeightsError(ValueError):
    """All loss weights are zero; the weighted mean is undefined."""


class CompressionUndefinedError(ValueError):
    """Cache past segment exceeds budget but no observation queries exist."""


class OracleFailureError(ValueError):
    """A reference oracle produced a non-finite value."""


class InsufficientDataError(ValueError):
    """Too few data points for the requested fit."""


class CheckpointError(ValueError):
    """Base class for checkpoint serialization problems."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint header carries an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ended before all declared records were read."""


class CheckpointShapeError(CheckpointError):
    """A parameter is missing or its stored shape disagrees with the model."""
