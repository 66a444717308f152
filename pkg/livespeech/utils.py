"""
Utility functions for the livespeech package.
Contains logging setup, seeding helpers and human readable formatting.
"""

import os
import sys
import logging
from typing import Optional, Sequence

import numpy as np

THREADS_ENV = "LIVESPEECH_THREADS"


def setup_logging(level: str = "INFO") -> logging.Logger:
    """Setup logging configuration."""
    logger = logging.getLogger("livespeech")
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    if not logger.handlers:
        handler = logging.StreamHandler(sys.stdout)
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Build a generator from a master seed and a path of integer keys.

    Streams derived from distinct key paths are independent, so work split
    across threads produces the same numbers as a sequential run.
    """
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def resolve_threads(requested: Optional[int] = None) -> int:
    """Number of worker lanes, capped by the LIVESPEECH_THREADS variable."""
    cap = os.getenv(THREADS_ENV)
    threads = requested or os.cpu_count() or 1
    if cap:
        try:
            threads = min(threads, max(1, int(cap)))
        except ValueError:
            logging.getLogger("livespeech").warning(
                f"Ignoring invalid {THREADS_ENV} value: {cap}"
            )
    return max(1, threads)


def ensure_directory_exists(file_path: str):
    """Ensure the directory for the given file path exists."""
    directory = os.path.dirname(file_path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory, exist_ok=True)


def format_bytes(bytes_value: float) -> str:
    """Convert bytes to human readable format."""
    for unit in ['B', 'KB', 'MB', 'GB', 'TB']:
        if bytes_value < 1024.0:
            return f"{bytes_value:.1f} {unit}"
        bytes_value /= 1024.0
    return f"{bytes_value:.1f} PB"


def format_ms(seconds: float) -> str:
    """Format a duration given in seconds as milliseconds."""
    return f"{seconds * 1000.0:.1f}ms"


def format_duration(seconds: float) -> str:
    """Format a wall-clock duration for log lines."""
    if seconds < 60:
        return f"{seconds:.1f}s"
    elif seconds < 3600:
        return f"{int(seconds / 60)}m {int(seconds % 60)}s"
    else:
        hours = int(seconds / 3600)
        minutes = int((seconds % 3600) / 60)
        return f"{hours}h {minutes}m"


def parse_int_list(value: str) -> Sequence[int]:
    """Parse a comma separated list of integers ("1,2,3")."""
    return tuple(int(item) for item in value.split(',') if item.strip())


def parse_float_list(value: str) -> Sequence[float]:
    """Parse a comma separated list of floats ("1.0,1.1")."""
    return tuple(float(item) for item in value.split(',') if item.strip())
