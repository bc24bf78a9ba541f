"""Exception hierarchy shared by the engine, the model code and the CLI."""


class MSDFError(Exception):
    pass


class ConfigError(MSDFError, ValueError):
    """Invalid configuration or channel/spatial arithmetic."""


class ShapeError(MSDFError, ValueError):
    pass


class UsageError(MSDFError, RuntimeError):
    pass


class DataError(MSDFError, OSError):
    """Unreadable, malformed or inconsistent input data."""


class LabelError(DataError, ValueError):
    pass


class WeightFileError(DataError):
    pass


class BadMagicError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ParamShapeError(WeightFileError):
    """Stored record does not match the model's parameter layout."""
