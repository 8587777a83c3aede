"""Exception types shared across the package."""


class ProtoNormError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ProtoNormError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class GraphError(ProtoNormError, RuntimeError):
    """Autodiff graph misuse: non-scalar loss, consumed or stale graph."""


class ConfigError(ProtoNormError, ValueError):
    """Invalid or inconsistent configuration."""


class InputError(ProtoNormError, ValueError):
    """Invalid runtime input (non-finite values, empty data, ...)."""


class ContractError(ProtoNormError, RuntimeError):
    """A call violated an API precondition (wrong mode, missing argument)."""


class ParseError(ProtoNormError, ValueError):
    """Malformed text data file."""


class IntegrityError(ProtoNormError, RuntimeError):
    """Corrupt or truncated checkpoint payload."""


class VersionError(IntegrityError):
    """Checkpoint schema version not supported by this build."""


class TrainingDiverged(ProtoNormError, RuntimeError):
    """Loss or gradients became non-finite during training."""
