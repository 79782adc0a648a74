"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, IoError -> 3,
NumericalError -> 4.
"""


class ResnctError(Exception):
    pass


class ConfigError(ResnctError):
    pass


class IoError(ResnctError):
    pass


class FormatError(IoError):
    """Malformed container header."""


class CorruptionError(IoError):
    """Header/payload size mismatch or truncated payload."""


class ManifestError(ConfigError):
    pass


class NumericalError(ResnctError):
    pass


class ShapeError(ResnctError):
    pass
