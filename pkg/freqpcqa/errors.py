"""
Exception hierarchy for freqpcqa.

Data problems derive from ValueError so callers that catch the builtin keep
working. The CLI maps each family to an exit code via ``exit_code_for``.
"""

from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class PCQAError(Exception):
    """Base class for every error raised by the library"""
    exit_code = EXIT_USAGE


class ConfigError(PCQAError, ValueError):
    """Invalid or unknown configuration values"""
    exit_code = EXIT_USAGE


class DataError(PCQAError, ValueError):
    """Unreadable, malformed or unusable input data"""
    exit_code = EXIT_DATA


class PlyFormatError(DataError):
    """Malformed PLY file, reported with its line or byte position"""

    def __init__(
        self,
        message: str,
        path: str,
        line: Optional[int] = None,
        offset: Optional[int] = None,
    ):
        self.path = path
        self.line = line
        self.offset = offset
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        location = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{path}{location}: {message}")


class ManifestError(DataError):
    """Manifest file missing, malformed, or inconsistent"""


class DegenerateCloudError(DataError):
    """Cloud whose scale is undefined (all points identical)"""


class SamplingError(DataError):
    """Patch sampling request the cloud cannot satisfy"""


class FeatureError(DataError):
    """Patch shape incompatible with the feature grid"""


class CheckpointError(DataError):
    """Corrupt or incompatible checkpoint file"""


class ShapeError(PCQAError, ValueError):
    """Operand shapes incompatible with an operation"""
    exit_code = EXIT_NUMERIC


class NumericError(PCQAError, ArithmeticError):
    """NaN, infinity or degenerate numeric result"""
    exit_code = EXIT_NUMERIC


class NonFiniteGradientError(NumericError):
    """A parameter received a NaN or infinite gradient"""

    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"non-finite gradient for parameter '{parameter}'")


class DegenerateMetricError(NumericError):
    """Correlation undefined because an input has zero variance"""


def exit_code_for(exc: BaseException) -> int:
    """Exit code the CLI reports for an exception"""
    if isinstance(exc, PCQAError):
        return exc.exit_code
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError)):
        return EXIT_DATA
    return EXIT_NUMERIC if isinstance(exc, ArithmeticError) else EXIT_USAGE
