"""Exception hierarchy shared by every module of the toolkit."""


class CipherError(Exception):
    """Base class for all toolkit errors."""


class SpecError(CipherError, ValueError):
    """A NetworkSpec is malformed (bad kinds, broken channel chain, ...)."""


class LayoutError(CipherError, ValueError):
    """Parameter layout does not match the layout induced by a spec."""

    def __init__(self, message, layer_id=None):
        super().__init__(message)
        self.layer_id = layer_id


class DigestMismatch(CipherError, ValueError):
    """A key was applied to a spec with a different architecture digest."""


class CorruptKeyFile(CipherError, ValueError):
    """A key file is truncated, has a bad magic/checksum, or cannot be parsed."""


class ShapeError(CipherError, ValueError):
    """Image or tensor shape incompatible with an operation."""


class NumericFailure(CipherError, ArithmeticError):
    """Non-finite values produced by a network layer."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingDiverged(CipherError, RuntimeError):
    """A loss became NaN/Inf; carries the trace recorded up to that point."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigError(CipherError, ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
