"""Exception hierarchy. Every error carries a machine-parseable category
that the CLI prints as ``error:<category>:<module>: <message>``."""


class MsunetError(Exception):
    category = "error"

    def __init__(self, message: str, module: str = ""):
        super().__init__(message)
        self.module = module


class DimensionError(MsunetError):
    category = "dimension"


class RankError(MsunetError):
    category = "rank"


class ConfigError(MsunetError):
    category = "config"


class BuildError(MsunetError):
    category = "build"


class DataError(MsunetError):
    category = "data"


class NumericError(MsunetError):
    category = "numeric"


class UsageError(MsunetError):
    category = "usage"


class FormatError(MsunetError):
    """Malformed file. ``offset`` is the byte position of the defect."""

    category = "format"

    def __init__(self, message: str, offset: int = 0, module: str = ""):
        super().__init__(f"{message} (byte offset {offset})", module)
        self.offset = offset
