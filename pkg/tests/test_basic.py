"""
Test package imports and basic functionality.
"""


def test_package_import():
    """Test that the package can be imported successfully."""
    import livespeech
    for name in livespeech.__all__:
        assert hasattr(livespeech, name), name


def test_version():
    """Test that version is accessible."""
    import livespeech
    assert livespeech.__version__ == "1.0.0"


def test_error_hierarchy():
    """Validation problems and runtime failures stay distinguishable."""
    from livespeech.exceptions import (
        CheckpointError, ConfigError, FormatError, LiveSpeechError, ShapeError, StateError,
        TrainingError, ValidationError
    )
    for error in (ShapeError, ConfigError, FormatError, CheckpointError, StateError):
        assert issubclass(error, ValidationError)
    assert issubclass(TrainingError, LiveSpeechError)
    assert not issubclass(TrainingError, ValidationError)
    assert issubclass(CheckpointError, FormatError)
