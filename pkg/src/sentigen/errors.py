"""Exception types shared across the package.

Config errors are distinguished from everything else because the command-line
entry point maps them to a dedicated exit code.
"""


class SentigenError(Exception):
    """Base class for all package-level failures."""


class ShapeError(SentigenError):
    """Operands or stored arrays have incompatible shapes."""


class ContractError(SentigenError):
    """A documented precondition was violated by the caller."""


class NumericError(SentigenError):
    """A computation produced or encountered non-finite values."""


class DataError(SentigenError):
    """A corpus file failed validation. Carries the offending line number."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConfigError(SentigenError):
    """Bad or missing configuration (registry entries, run configs, paths)."""


class VocabularyError(SentigenError):
    """A token, speaker, or label cannot be represented in the vocabulary."""


class DecodeError(SentigenError):
    """Generated output cannot be decoded into a label."""


class MetricError(SentigenError):
    """A metric is undefined for the given inputs."""
