"""Exception types raised across the package."""


class MMTSDError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MMTSDError, ValueError):
    pass


class SimulationError(MMTSDError, RuntimeError):
    pass


class InputError(MMTSDError, ValueError):
    pass


class SpeakerLookupError(MMTSDError, KeyError):
    pass


class CorpusError(MMTSDError, ValueError):
    pass


class DatasetError(MMTSDError, ValueError):
    pass


class FormatError(MMTSDError, ValueError):
    """Corrupt or inconsistent file content. The message names the file."""


class ParseError(FormatError):
    pass


class UndefinedMetricError(MMTSDError, ValueError):
    pass


class UsageError(MMTSDError):
    pass
