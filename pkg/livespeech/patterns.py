"""
Decoding-order layouts for RVQ code grids.

The delayed pattern shifts codebook q right by q columns so that one decoding
step emits Q codes taken from Q different frames; frame i is complete after
step i + Q - 1. The flatten pattern emits all Q * T codes one at a time,
frame-major. Steps and frames are counted from 1, array indices from 0.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .codec import CodeGrid
from .exceptions import ShapeError, ValidationError


class PatternKind(str, Enum):
    DELAYED = "delayed"
    FLATTEN = "flatten"
    # two-stage AR + NAR layout; listed for completeness, not implemented
    VALL_E = "vall_e"


@dataclass(frozen=True)
class PatternLayout:
    kind: PatternKind
    n_codebooks: int
    pad_code: int

    def n_steps(self, n_frames: int) -> int:
        """Number of decoding steps needed for n_frames frames."""
        if self.kind == PatternKind.DELAYED:
            return n_frames + self.n_codebooks - 1
        if self.kind == PatternKind.FLATTEN:
            return self.n_codebooks * n_frames
        raise NotImplementedError(f"{self.kind.value} pattern is not implemented")


@dataclass(frozen=True, eq=False)
class ShiftedGrid:
    """Q x (T + Q - 1) codes in delayed order, PAD outside the diagonal band."""
    codes: np.ndarray
    codebook_size: int
    n_frames: int

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        if codes.ndim != 2:
            raise ShapeError(f"ShiftedGrid: expected 2-D codes, got shape {codes.shape}")
        if codes.shape[1] != self.n_frames + codes.shape[0] - 1:
            raise ShapeError(
                f"ShiftedGrid: {codes.shape[1]} columns do not match T + Q - 1 = "
                f"{self.n_frames + codes.shape[0] - 1}"
            )
        object.__setattr__(self, "codes", codes)

    @property
    def n_codebooks(self) -> int:
        return self.codes.shape[0]

    @property
    def n_steps(self) -> int:
        return self.codes.shape[1]

    @property
    def pad_code(self) -> int:
        return self.codebook_size

    def valid_mask(self) -> np.ndarray:
        return band_mask(self.n_codebooks, self.n_frames)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ShiftedGrid):
            return NotImplemented
        return (self.codebook_size == other.codebook_size and self.n_frames == other.n_frames
                and np.array_equal(self.codes, other.codes))


def band_mask(n_codebooks: int, n_frames: int) -> np.ndarray:
    """True where row q of a shifted grid holds a real code (column q .. q + T - 1)."""
    q = np.arange(n_codebooks)[:, None]
    col = np.arange(n_frames + n_codebooks - 1)[None, :]
    return (col >= q) & (col < q + n_frames)


def shift_delayed(grid: CodeGrid) -> ShiftedGrid:
    """Delay codebook q by q columns, filling the gaps with PAD."""
    if grid.has_pad():
        raise ValidationError("shift_delayed: input grid already contains PAD codes")
    n_q, n_t = grid.codes.shape
    shifted = np.full((n_q, n_t + n_q - 1), grid.pad_code, dtype=np.int64)
    for q in range(n_q):
        shifted[q, q:q + n_t] = grid.codes[q]
    return ShiftedGrid(shifted, grid.codebook_size, n_t)


def unshift_delayed(shifted: ShiftedGrid) -> CodeGrid:
    """Inverse of shift_delayed; rejects grids whose PAD layout is malformed."""
    validate_shifted(shifted)
    n_q, n_t = shifted.n_codebooks, shifted.n_frames
    codes = np.empty((n_q, n_t), dtype=np.int64)
    for q in range(n_q):
        codes[q] = shifted.codes[q, q:q + n_t]
    return CodeGrid(codes, shifted.codebook_size)


def validate_shifted(shifted: ShiftedGrid):
    """Raise with the first offending (row, column) if PAD sits in the wrong place."""
    band = shifted.valid_mask()
    is_pad = shifted.codes == shifted.pad_code
    out_of_range = (shifted.codes < 0) | (shifted.codes > shifted.pad_code)
    wrong = (band & is_pad) | (~band & ~is_pad) | out_of_range
    if np.any(wrong):
        row, col = (int(v) for v in np.argwhere(wrong)[0])
        expected = "a code" if band[row, col] else "PAD"
        raise ValidationError(
            f"unshift_delayed: malformed layout at (row {row}, column {col}): expected {expected}, "
            f"found {int(shifted.codes[row, col])}"
        )


def flatten(grid: CodeGrid) -> np.ndarray:
    """Frame-major, codebook-minor sequence c_1^(1), ..., c_1^(Q), c_2^(1), ..."""
    if grid.has_pad():
        raise ValidationError("flatten: input grid contains PAD codes")
    return grid.codes.T.reshape(-1).copy()


def unflatten(sequence: np.ndarray, n_codebooks: int, codebook_size: int,
              n_frames: Optional[int] = None) -> CodeGrid:
    """Inverse of flatten."""
    sequence = np.asarray(sequence, dtype=np.int64)
    if sequence.ndim != 1 or n_codebooks < 1 or sequence.size % n_codebooks != 0:
        raise ValidationError(
            f"unflatten: length {sequence.size} is not divisible by Q = {n_codebooks}"
        )
    frames = sequence.size // n_codebooks
    if n_frames is not None and n_frames != frames:
        raise ValidationError(f"unflatten: expected {n_frames} frames, sequence holds {frames}")
    return CodeGrid(sequence.reshape(frames, n_codebooks).T.copy(), codebook_size)


def frame_completion_index(step: int, n_codebooks: int) -> Optional[int]:
    """Highest frame fully decoded once shifted column `step` is consumed, or None."""
    if step < 1:
        raise ValidationError(f"frame_completion_index: step must be >= 1, got {step}")
    frame = step - n_codebooks + 1
    return frame if frame >= 1 else None


def column_frames(step: int, n_codebooks: int, n_frames: int) -> np.ndarray:
    """Frame index (1-based, 0 for PAD) that row q of shifted column `step` belongs to."""
    frames = step - np.arange(n_codebooks)
    return np.where((frames >= 1) & (frames <= n_frames), frames, 0)
