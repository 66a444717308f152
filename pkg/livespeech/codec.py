"""
Residual vector quantization over continuous feature frames.

Each frame z is quantized by a cascade of Q codebooks: r(1) = z, the code at
stage q is the index of the nearest codeword to r(q), and r(q+1) is what is
left after subtracting that codeword. Decoding sums the chosen codewords of
the first q_used stages.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .exceptions import ShapeError, ValidationError
from .utils import derive_rng

logger = logging.getLogger("livespeech.codec")

DEFAULT_FRAME_RATE = 75.0
KMEANS_ITERATIONS = 20
_CHUNK = 4096


@dataclass(frozen=True)
class CodecConfig:
    """Codec training settings."""
    n_codebooks: int = 8
    codebook_size: int = 64
    zero_reserved: bool = True
    iterations: int = KMEANS_ITERATIONS


@dataclass(frozen=True)
class FeatureSequence:
    """T x D feature frames at a fixed frame rate."""
    frames: np.ndarray
    frame_rate_hz: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ShapeError(f"FeatureSequence: expected (T>=1, D) frames, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("FeatureSequence: frames contain non-finite values")
        if self.frame_rate_hz <= 0:
            raise ValidationError(f"FeatureSequence: frame rate must be positive, got {self.frame_rate_hz}")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.frame_rate_hz

    def crop(self, n_frames: int) -> "FeatureSequence":
        """First n_frames frames (all of them if shorter)."""
        return FeatureSequence(self.frames[:max(1, n_frames)], self.frame_rate_hz)


@dataclass(frozen=True, eq=False)
class Codebooks:
    """Q stages of K x D codewords."""
    stages: np.ndarray
    zero_reserved: bool = True

    def __post_init__(self):
        stages = np.asarray(self.stages, dtype=np.float32)
        if stages.ndim != 3 or stages.shape[0] < 1 or stages.shape[1] < 2:
            raise ShapeError(f"Codebooks: expected (Q>=1, K>=2, D) stages, got shape {stages.shape}")
        if self.zero_reserved and np.any(stages[:, 0, :] != 0):
            raise ValidationError("Codebooks: zero_reserved requires entry 0 of every stage to be zero")
        object.__setattr__(self, "stages", stages)

    @property
    def n_codebooks(self) -> int:
        return self.stages.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.stages.shape[1]

    @property
    def dim(self) -> int:
        return self.stages.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Codebooks):
            return NotImplemented
        return self.zero_reserved == other.zero_reserved and np.array_equal(self.stages, other.stages)


@dataclass(frozen=True, eq=False)
class CodeGrid:
    """Q x T integer codes, one column per frame; PAD is codebook_size."""
    codes: np.ndarray
    codebook_size: int

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[0] < 1:
            raise ShapeError(f"CodeGrid: expected (Q, T) codes, got shape {codes.shape}")
        if codes.size and (codes.min() < 0 or codes.max() > self.codebook_size):
            raise ValidationError(
                f"CodeGrid: codes must lie in [0, {self.codebook_size}] (PAD = {self.codebook_size})"
            )
        object.__setattr__(self, "codes", codes)

    @property
    def n_codebooks(self) -> int:
        return self.codes.shape[0]

    @property
    def n_frames(self) -> int:
        return self.codes.shape[1]

    @property
    def pad_code(self) -> int:
        return self.codebook_size

    def has_pad(self) -> bool:
        return bool(np.any(self.codes == self.pad_code))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CodeGrid):
            return NotImplemented
        return self.codebook_size == other.codebook_size and np.array_equal(self.codes, other.codes)


def _squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact ||x_i - c_k||^2, computed by differences so ties stay exact."""
    out = np.empty((x.shape[0], centroids.shape[0]), dtype=np.float64)
    for start in range(0, x.shape[0], _CHUNK):
        diff = x[start:start + _CHUNK, None, :] - centroids[None, :, :]
        out[start:start + _CHUNK] = (diff * diff).sum(axis=-1)
    return out


def _nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin picks the first minimum, i.e. ties go to the lowest index
    return np.argmin(_squared_distances(x, centroids), axis=1)


def _init_centroids(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    distinct = np.unique(x, axis=0)
    take = min(n, distinct.shape[0])
    chosen = distinct[rng.choice(distinct.shape[0], size=take, replace=False)]
    if take < n:
        extra = x[rng.choice(x.shape[0], size=n - take, replace=True)]
        chosen = np.concatenate([chosen, extra], axis=0)
    return chosen


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iterations: int = KMEANS_ITERATIONS,
           pin_zero: bool = False) -> np.ndarray:
    """
    Lloyd iterations on the rows of x.

    Centroids start from distinct data rows; a cluster left empty is reseeded
    to the point farthest from its current centroid. With pin_zero, centroid
    0 is held at the origin throughout so it takes part in every assignment.
    """
    x = np.asarray(x, dtype=np.float64)
    free = k - 1 if pin_zero else k
    centroids = _init_centroids(x, free, rng)
    if pin_zero:
        centroids = np.concatenate([np.zeros((1, x.shape[1])), centroids], axis=0)

    for _ in range(iterations):
        distances = _squared_distances(x, centroids)
        labels = np.argmin(distances, axis=1)
        own = distances[np.arange(x.shape[0]), labels]
        far_order = np.argsort(-own, kind="stable")
        reseed_at = 0
        for c in range(k):
            if pin_zero and c == 0:
                continue
            members = labels == c
            if np.any(members):
                centroids[c] = x[members].mean(axis=0)
            else:
                centroids[c] = x[far_order[reseed_at % x.shape[0]]]
                reseed_at += 1
    return centroids


def train_codebooks(corpus: Sequence[FeatureSequence], n_codebooks: int, codebook_size: int,
                    seed: int, zero_reserved: bool = True,
                    iterations: int = KMEANS_ITERATIONS, progress: bool = False) -> Codebooks:
    """
    Learn Q codebooks stage by stage with k-means on the running residuals.

    Args:
        corpus: Feature sequences to fit
        n_codebooks: Number of stages Q
        codebook_size: Codewords per stage K
        seed: Master seed; each stage draws from its own derived stream
        zero_reserved: Hold codeword 0 of every stage at the zero vector
        iterations: Lloyd iterations per stage
        progress: Show a progress bar over stages

    Returns:
        Trained Codebooks
    """
    if not corpus:
        raise ValidationError("train_codebooks: corpus is empty")
    dims = {seq.dim for seq in corpus}
    if len(dims) != 1:
        raise ShapeError(f"train_codebooks: corpus mixes feature dimensions {sorted(dims)}")
    residual = np.concatenate([seq.frames for seq in corpus], axis=0).astype(np.float64)
    if codebook_size < 2 or codebook_size > residual.shape[0]:
        raise ValidationError(
            f"train_codebooks: codebook size {codebook_size} must lie in [2, {residual.shape[0]}] "
            f"(total frame count)"
        )
    if n_codebooks < 1:
        raise ValidationError(f"train_codebooks: need at least one codebook, got {n_codebooks}")

    stages: List[np.ndarray] = []
    for q in tqdm(range(n_codebooks), desc="codebooks", disable=not progress):
        centroids = kmeans(residual, codebook_size, derive_rng(seed, q), iterations, pin_zero=zero_reserved)
        labels = _nearest(residual, centroids)
        stored = centroids.astype(np.float32)
        stages.append(stored)
        residual = residual - stored.astype(np.float64)[labels]
        logger.info(f"Stage {q + 1}/{n_codebooks}: residual energy {np.mean(np.sum(residual ** 2, axis=1)):.5f}")
    return Codebooks(np.stack(stages), zero_reserved=zero_reserved)


def _check_dim(z: FeatureSequence, cb: Codebooks):
    if z.dim != cb.dim:
        raise ShapeError(f"rvq: feature dimension {z.dim} does not match codebook dimension {cb.dim}")


def _encode_with_residuals(z: FeatureSequence, cb: Codebooks):
    residual = z.frames.astype(np.float64)
    stages = cb.stages.astype(np.float64)
    codes = np.empty((cb.n_codebooks, z.n_frames), dtype=np.int64)
    energies = np.empty((cb.n_codebooks + 1, z.n_frames), dtype=np.float64)
    energies[0] = (residual * residual).sum(axis=1)
    for q in range(cb.n_codebooks):
        codes[q] = _nearest(residual, stages[q])
        residual = residual - stages[q][codes[q]]
        energies[q + 1] = (residual * residual).sum(axis=1)
    return codes, energies


def rvq_encode(z: FeatureSequence, cb: Codebooks) -> CodeGrid:
    """Quantize every frame of z into Q codes."""
    _check_dim(z, cb)
    codes, _ = _encode_with_residuals(z, cb)
    return CodeGrid(codes, cb.codebook_size)


def _check_q_used(q_used: Optional[int], cb: Codebooks) -> int:
    q_used = cb.n_codebooks if q_used is None else q_used
    if not 1 <= q_used <= cb.n_codebooks:
        raise ValidationError(f"rvq: q_used must lie in [1, {cb.n_codebooks}], got {q_used}")
    return q_used


def rvq_decode(grid: CodeGrid, cb: Codebooks, q_used: Optional[int] = None,
               frame_rate_hz: float = DEFAULT_FRAME_RATE) -> FeatureSequence:
    """Sum the codewords of the first q_used stages for every frame."""
    q_used = _check_q_used(q_used, cb)
    if grid.n_codebooks != cb.n_codebooks or grid.codebook_size != cb.codebook_size:
        raise ShapeError(
            f"rvq_decode: grid is {grid.n_codebooks}x{grid.codebook_size} codes, codebooks are "
            f"{cb.n_codebooks}x{cb.codebook_size}"
        )
    if grid.has_pad():
        raise ValidationError("rvq_decode: grid contains PAD codes; unshift it first")
    stages = cb.stages.astype(np.float64)
    frames = np.zeros((grid.n_frames, cb.dim), dtype=np.float64)
    for q in range(q_used):
        frames += stages[q][grid.codes[q]]
    return FeatureSequence(frames.astype(np.float32), frame_rate_hz)


def residual_energies(z: FeatureSequence, cb: Codebooks) -> np.ndarray:
    """(Q+1) x T squared residual norms; row u is the energy left after u stages."""
    _check_dim(z, cb)
    _, energies = _encode_with_residuals(z, cb)
    return energies


def quantization_error(z: FeatureSequence, cb: Codebooks, q_used: Optional[int] = None) -> float:
    """Mean squared error between z and its reconstruction from q_used stages."""
    q_used = _check_q_used(q_used, cb)
    energies = residual_energies(z, cb)
    return float(energies[q_used].sum() / (z.n_frames * z.dim))
