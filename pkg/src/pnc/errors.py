"""Exception hierarchy. Each category maps to a CLI exit code."""

from __future__ import annotations


class PNCError(Exception):
    exit_code = 1


class InvalidStructureError(PNCError):
    exit_code = 2


class ConfigError(PNCError):
    exit_code = 2

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(PNCError):
    exit_code = 3


class FormatError(DataError):
    """Malformed binary input (IDX files, checkpoints)."""

    def __init__(self, message: str, offset: int | None = None, path: str | None = None):
        self.offset = offset
        self.path = path
        parts = []
        if path is not None:
            parts.append(str(path))
        if offset is not None:
            parts.append(f"byte {offset}")
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ChecksumError(FormatError):
    pass


class FingerprintMismatch(DataError):
    pass


class QueryError(PNCError):
    exit_code = 4


class ValidationFailure(PNCError):
    exit_code = 5
