"""
Desk-scale evaluation metrics built on the known generator of the synthetic corpus.

- oracle_symbol_error_rate: frame classification against the symbol
  prototypes after undoing the speaker's gain and tilt, collapse of repeated
  frames, then edit distance over the reference length.
- speaker_similarity_proxy: cosine between least-squares estimates of theta.
"""

from typing import Sequence, Union

import jiwer
import numpy as np

from .codec import CodeGrid, FeatureSequence
from .dataset import SPEAKER_SCALE, DatasetSpec, SpeechWorld, world_for
from .exceptions import ShapeError, ValidationError

WorldLike = Union[SpeechWorld, DatasetSpec]


def _world(spec: WorldLike) -> SpeechWorld:
    return spec if isinstance(spec, SpeechWorld) else world_for(spec)


def _frames(features: Union[FeatureSequence, np.ndarray], world: SpeechWorld) -> np.ndarray:
    frames = features.frames if isinstance(features, FeatureSequence) else np.asarray(features)
    if frames.ndim != 2 or frames.shape[1] != world.spec.feature_dim:
        raise ShapeError(f"metrics: expected (T, {world.spec.feature_dim}) features, got {frames.shape}")
    return frames.astype(np.float64)


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> int:
    """Levenshtein distance with unit costs, aligned by jiwer over one token per symbol."""
    hyp_tokens = [str(int(v)) for v in hyp]
    ref_tokens = [str(int(v)) for v in ref]
    # jiwer rejects empty sentences
    if not hyp_tokens or not ref_tokens:
        return len(hyp_tokens) + len(ref_tokens)
    out = jiwer.process_words(" ".join(ref_tokens), " ".join(hyp_tokens))
    return int(out.substitutions + out.deletions + out.insertions)


def estimate_theta(features: Union[FeatureSequence, np.ndarray], spec: WorldLike) -> np.ndarray:
    """
    Least-squares speaker vector from the speaker-subspace projection.

    First pass fits a constant; second pass refits with the modulation
    envelope implied by the first estimate.
    """
    world = _world(spec)
    frames = _frames(features, world)
    if frames.shape[0] < world.spec.theta_dim:
        raise ValidationError(
            f"estimate_theta: {frames.shape[0]} frames are too few to fit a "
            f"{world.spec.theta_dim}-dim speaker vector"
        )
    projected = frames @ world.speaker_basis / SPEAKER_SCALE
    theta, *_ = np.linalg.lstsq(np.ones((frames.shape[0], 1)), projected, rcond=None)
    envelope = world.modulation(theta[0], frames.shape[0])[:, None]
    theta, *_ = np.linalg.lstsq(envelope, projected, rcond=None)
    return theta[0]


def recognize(features: Union[FeatureSequence, np.ndarray], spec: WorldLike) -> np.ndarray:
    """Collapsed symbol sequence read off the features."""
    world = _world(spec)
    frames = _frames(features, world)
    theta = estimate_theta(frames, world)
    content = frames @ world.content_basis / (world.gain(theta) * world.tilt(theta))
    diff = content[:, None, :] - world.prototypes[None, :, :]
    labels = np.argmin((diff * diff).sum(axis=-1), axis=1)
    keep = np.concatenate([[True], labels[1:] != labels[:-1]])
    return labels[keep]


def oracle_symbol_error_rate(features: Union[FeatureSequence, np.ndarray], expected_text: Sequence[int],
                             spec: WorldLike) -> float:
    """Edit distance between recognized and expected symbols over the reference length, capped at 1."""
    expected = np.asarray(expected_text, dtype=np.int64)
    if expected.size == 0:
        raise ValidationError("oracle_symbol_error_rate: expected text is empty")
    hyp = recognize(features, spec)
    return float(min(1.0, edit_distance(hyp, expected) / expected.size))


def speaker_similarity_proxy(features_a: Union[FeatureSequence, np.ndarray],
                             features_b: Union[FeatureSequence, np.ndarray], spec: WorldLike) -> float:
    """Cosine of the two theta estimates, in [-1, 1]."""
    a = estimate_theta(features_a, spec)
    b = estimate_theta(features_b, spec)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        return 0.0
    return float(np.clip(a @ b / norm, -1.0, 1.0))


def per_codebook_accuracy(predicted: CodeGrid, reference: CodeGrid) -> np.ndarray:
    """Fraction of matching codes for every codebook."""
    if predicted.codes.shape != reference.codes.shape:
        raise ShapeError(
            f"per_codebook_accuracy: grids differ in shape {predicted.codes.shape} vs {reference.codes.shape}"
        )
    return (predicted.codes == reference.codes).mean(axis=1)


def logits_accuracy(logits: np.ndarray, targets: np.ndarray, pad_code: int) -> np.ndarray:
    """Argmax accuracy per codebook of (Q, T', K) logits over non-PAD targets."""
    valid = targets != pad_code
    hits = (np.argmax(logits, axis=-1) == targets) & valid
    return hits.sum(axis=1) / np.maximum(valid.sum(axis=1), 1)
