"""Exception hierarchy shared across the package.

Every error carries the process exit code the CLI should use, so command
handlers can map failures without a big if/else ladder:

    1  usage / configuration problems
    2  data problems (parse failures, bad labels, generation failures)
    3  numeric failures (NaN gradients, failed gradient checks, bad shapes)
    4  state problems (missing checkpoints, uninitialised statistics)
"""


class PoseForgeError(Exception):
    exit_code = 1


class UsageError(PoseForgeError):
    exit_code = 1


class ConfigError(PoseForgeError):
    """Bad or missing configuration value, unknown key, invalid dimensions."""

    exit_code = 1


class DataError(PoseForgeError):
    """Malformed input data (poses, images, labels)."""

    exit_code = 2


class ParseError(DataError):
    """Text input that failed to parse; message includes the line number."""


class GenerationError(DataError):
    """Synthetic scene generation could not satisfy its constraints."""


class NumericError(PoseForgeError):
    """Non-finite values or failed numerical checks."""

    exit_code = 3


class DimensionError(NumericError):
    """Operand shapes incompatible with the requested operation."""


class StateError(PoseForgeError):
    """Operation requires state that does not exist yet (checkpoints, stats)."""

    exit_code = 4
