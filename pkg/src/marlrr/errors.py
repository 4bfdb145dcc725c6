"""Exception taxonomy shared by all marlrr modules."""


class MarlrrError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MarlrrError):
    """Operand shapes do not agree."""


class NumericError(MarlrrError):
    """A value that must be finite is NaN or infinite."""


class StateError(MarlrrError):
    """Operation invoked in an invalid state (no recorded forward, stepping a finished episode, ...)."""


class ConfigError(MarlrrError):
    """Invalid configuration: bad value range, unknown key, or unparseable file."""


class ContractError(MarlrrError):
    """A caller violated an operation precondition."""


class NotReadyError(MarlrrError):
    """Resource not ready yet (e.g. replay buffer smaller than the batch size)."""


class AlignmentError(MarlrrError):
    """Input series do not share a common x grid."""
