"""Exception hierarchy. CLI maps ConfigError subclasses to exit code 2."""


class EEGPEError(Exception):
    pass


class ConfigError(EEGPEError, ValueError):
    """Invalid configuration or usage; never a numeric failure."""


class DimensionError(ConfigError):
    pass


class ContractError(EEGPEError):
    """A caller violated an operation's precondition."""


class GeometryError(ConfigError):
    pass


class ParseError(ConfigError):
    pass


class ProtocolError(ConfigError):
    pass


class CheckpointError(ConfigError):
    pass


class MetricError(EEGPEError):
    pass


class NumericError(EEGPEError):
    """Non-finite values or a failed numerical check."""
