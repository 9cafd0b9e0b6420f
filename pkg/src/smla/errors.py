"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class SmlaError(Exception):
    exit_code = 1


class ConfigError(SmlaError):
    exit_code = 2


class ParameterError(ConfigError, ValueError):
    """An argument is outside its valid range (dropout rate, label index, ...)."""


class IngestionError(SmlaError):
    exit_code = 3


class MissingFileError(IngestionError, FileNotFoundError):
    pass


class MalformedHeaderError(IngestionError):
    pass


class UnsupportedEncodingError(IngestionError):
    pass


class ChannelCountError(IngestionError):
    pass


class SampleRateError(IngestionError):
    pass


class TooShortError(IngestionError):
    pass


class CheckpointError(IngestionError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, name, expected, got):
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, checkpoint has {tuple(got)}")
        self.name = name


class NumericError(SmlaError, ArithmeticError):
    exit_code = 4


class DimensionError(NumericError, ValueError):
    pass


class EvaluationError(SmlaError):
    exit_code = 5
