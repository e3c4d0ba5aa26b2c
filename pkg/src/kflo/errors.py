"""Exception types shared across the package.

Each failure mode the CLI must distinguish gets its own class so exit
codes can be mapped without string matching.
"""


class KfloError(Exception):
    """Base class for every library error."""


class ShapeError(KfloError, ValueError):
    """Tensor dimensions incompatible with an operation; names the axis."""


class InputError(KfloError, ValueError):
    """Bad runtime input, e.g. a class label outside the valid range."""


class UsageError(KfloError):
    """API misuse: non-scalar loss, collapsing an already-deployed graph."""


class StructureError(KfloError):
    """Cascade width chain broken between consecutive pointwise kernels."""


class ConfigError(KfloError):
    """Invalid configuration value or combination."""


class DataError(KfloError):
    """Dataset file unreadable, malformed, or inconsistent."""


class DeterminismError(KfloError):
    """A loss function produced different values on repeated evaluation."""


class DivergenceError(KfloError):
    """Non-finite values appeared during optimization."""


class ModelFileError(KfloError):
    """Base class for model (de)serialization failures."""


class ModelMagicError(ModelFileError):
    """File does not start with the expected magic bytes."""


class ModelVersionError(ModelFileError):
    """File uses an unsupported format version."""


class ModelTruncatedError(ModelFileError):
    """File ended in the middle of a structure."""


class ModelChecksumError(ModelFileError):
    """Trailing CRC32 does not match the file contents."""


class ModelModeError(ModelFileError):
    """Model is in the wrong mode (training vs deployed) for the caller."""
