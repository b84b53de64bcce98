"""Exception hierarchy shared by the library and the CLI.

Every exception carries an ``exit_code`` so the command line front-end can
map failures to the documented exit-code table (docs/errors.md) without
inspecting messages.
"""

from __future__ import annotations


class DircError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    category = "internal"


class ConfigError(DircError, ValueError):
    exit_code = 4
    category = "config"


class ShapeError(DircError, ValueError):
    exit_code = 1
    category = "shape"


class TokenError(DircError, ValueError):
    """Invalid token id or out-of-range physical value."""

    exit_code = 5
    category = "token"

    def __init__(self, message: str, value=None, position: int | None = None):
        super().__init__(message)
        self.value = value
        self.position = position


class OutOfRangeError(TokenError):
    pass


class InvalidTokenError(TokenError):
    pass


class DecodeError(TokenError):
    pass


class TruncationError(TokenError):
    """Track has more hits than the sequence budget allows."""


class DatasetError(DircError):
    exit_code = 5
    category = "dataset"


class VersionMismatchError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class IntegrityError(DatasetError):
    """Header and payload disagree (e.g. the stored track count)."""


class MalformedRecordError(DatasetError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class CheckpointError(DircError):
    exit_code = 6
    category = "checkpoint"


class IncompatibleCheckpointError(CheckpointError):
    def __init__(self, fields: list[str]):
        super().__init__("checkpoint/config mismatch in fields: " + ", ".join(fields))
        self.fields = list(fields)


class ModeError(DircError):
    """Operation invoked on a model in the wrong mode (generative vs classifier)."""

    exit_code = 6
    category = "mode"


class NonFiniteLossError(DircError, FloatingPointError):
    exit_code = 7
    category = "training"

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class EvaluationError(DircError):
    exit_code = 8
    category = "evaluation"


class MissingFileError(DircError, FileNotFoundError):
    exit_code = 3
    category = "missing-file"
