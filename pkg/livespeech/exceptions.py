"""
Exception hierarchy for the livespeech package.

Everything raised on purpose derives from LiveSpeechError. ValidationError
covers bad inputs (shapes, configuration, files) and maps to CLI exit code 1;
the remaining errors are runtime failures and map to exit code 2.
"""


class LiveSpeechError(Exception):
    """Base class for all livespeech errors."""
    pass


class ValidationError(LiveSpeechError):
    """Raised when an input, argument or file fails validation."""
    pass


class ShapeError(ValidationError):
    """Raised when array shapes are incompatible for an operation."""
    pass


class ConfigError(ValidationError):
    """Raised when configuration is missing, unknown or inconsistent."""
    pass


class FormatError(ValidationError):
    """Raised when a serialized file is malformed."""
    pass


class CheckpointError(FormatError):
    """Raised when a checkpoint cannot be loaded or does not match the config."""
    pass


class DatasetError(ValidationError):
    """Raised when a dataset spec is degenerate or a dataset is inconsistent."""
    pass


class StateError(ValidationError):
    """Raised when a decoder state is reused after it has been advanced."""
    pass


class TrainingError(LiveSpeechError):
    """Raised when training fails at runtime (e.g. non-finite loss)."""
    pass


class NumericsError(LiveSpeechError):
    """Raised when a numerical procedure produces non-finite values."""
    pass
