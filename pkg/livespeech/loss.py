"""
Codebook-weighted cross-entropy.

Three weighting schemes are supported:

- uniform: every valid term has weight 1 (plain mean cross-entropy).
- adaptive: within each frame, the weight of codebook q is the product of the
  lambda-powered probabilities the model assigns to the correct codes of all
  earlier codebooks of that frame. Weights are constants as far as the
  gradient is concerned. With p_max, terms the model already predicts with
  probability above p_max are dropped and the survivors rescaled so the
  largest weight is 1.
- static_priority: fixed per-codebook weights (16, 8, 4, 2, 1, ...) decayed
  geometrically to 1 over training.

The loss is normalized by the number of non-PAD targets (Q * T), whatever the
weights are.
"""

import csv
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, ShapeError, ValidationError
from .numerics import Node
from .patterns import ShiftedGrid, band_mask
from .utils import ensure_directory_exists

logger = logging.getLogger("livespeech.loss")

SCHEMES = ("uniform", "adaptive", "static_priority")


@dataclass(frozen=True)
class LossConfig:
    scheme: str = "adaptive"
    lam: float = 0.1
    p_max: Optional[float] = None
    static_init: Tuple[float, ...] = (16.0, 8.0, 4.0, 2.0)
    total_steps: int = 20000

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"LossConfig: scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.lam < 0:
            raise ConfigError(f"LossConfig: lambda must be >= 0, got {self.lam}")
        if self.p_max is not None and not 0.0 < self.p_max <= 1.0:
            raise ConfigError(f"LossConfig: p_max must lie in (0, 1], got {self.p_max}")
        if self.total_steps < 1:
            raise ConfigError(f"LossConfig: total_steps must be positive, got {self.total_steps}")
        object.__setattr__(self, "static_init", tuple(float(w) for w in self.static_init))

    @classmethod
    def uniform(cls) -> "LossConfig":
        return cls(scheme="uniform", lam=0.0)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["static_init"] = list(self.static_init)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "LossConfig":
        data = dict(data)
        data["static_init"] = tuple(data.get("static_init", cls.static_init))
        return cls(**data)


@dataclass(frozen=True, eq=False)
class FrameWeightMatrix:
    """Q x T' loss weights; mask marks terms that are ignored (PAD or p_max)."""
    weights: np.ndarray
    mask: np.ndarray

    def effective(self) -> np.ndarray:
        return np.where(self.mask, 0.0, self.weights)

    def mean_per_codebook(self, valid: np.ndarray) -> np.ndarray:
        """Mean weight of each codebook over its valid terms (masked terms count as 0)."""
        counts = np.maximum(valid.sum(axis=1), 1)
        return (self.effective() * valid).sum(axis=1) / counts


def correct_prob(probs: np.ndarray, targets: np.ndarray, pad_code: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Probability of the correct code per (codebook, position).

    Args:
        probs: (..., K) distributions
        targets: (...) target codes, PAD allowed when pad_code is given
        pad_code: PAD sentinel (normally K)

    Returns:
        (p_tilde, pad_mask); p_tilde is 0 at PAD slots
    """
    probs = np.asarray(probs)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.shape[:-1] != targets.shape:
        raise ShapeError(f"correct_prob: probs {probs.shape} do not match targets {targets.shape}")
    n_classes = probs.shape[-1]
    pad = targets == pad_code if pad_code is not None else np.zeros(targets.shape, dtype=bool)
    if np.any(~pad & ((targets < 0) | (targets >= n_classes))):
        raise ValidationError(f"correct_prob: targets must lie in [0, {n_classes - 1}] or be PAD")
    safe = np.where(pad, 0, targets)
    picked = np.take_along_axis(probs, safe[..., None], axis=-1)[..., 0]
    return np.where(pad, 0.0, np.clip(picked, 0.0, 1.0)), pad


def frame_weights(p_tilde: np.ndarray, lam: float) -> np.ndarray:
    """
    w(1) = 1, w(q) = prod_{q' < q} p_tilde(q') ** lam along axis 0.

    Accepts a single frame (Q,) or a block of frames (Q, F).
    """
    p_tilde = np.asarray(p_tilde, dtype=np.float64)
    powered = np.power(p_tilde, lam)
    weights = np.ones_like(p_tilde)
    for q in range(1, p_tilde.shape[0]):
        weights[q] = weights[q - 1] * powered[q - 1]
    return weights


def apply_pmax(weights: np.ndarray, p_tilde: np.ndarray, p_max: Optional[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Drop terms with p_tilde > p_max and rescale survivors to a maximum of 1.

    Works on (Q,) or (Q, F) blocks, one frame per column. A fully masked
    column gets all-zero weights. Returns (weights, mask).
    """
    weights = np.asarray(weights, dtype=np.float64)
    p_tilde = np.asarray(p_tilde, dtype=np.float64)
    if p_max is None:
        return weights.copy(), np.zeros(weights.shape, dtype=bool)
    mask = p_tilde > p_max
    survivors = np.where(mask, 0.0, weights)
    top = survivors.max(axis=0, keepdims=True)
    scaled = np.divide(survivors, top, out=np.zeros_like(survivors), where=top > 0)
    return np.where(mask, 0.0, scaled), mask


def static_priority_weights(step: int, cfg: LossConfig, n_codebooks: int) -> np.ndarray:
    """w_q(step) = w_q(0) ** max(0, 1 - step / total_steps); codebooks past static_init start at 1."""
    if step < 0:
        raise ValidationError(f"static_priority_weights: step must be >= 0, got {step}")
    initial = np.ones(n_codebooks, dtype=np.float64)
    count = min(n_codebooks, len(cfg.static_init))
    initial[:count] = cfg.static_init[:count]
    exponent = max(0.0, 1.0 - step / cfg.total_steps)
    return np.power(initial, exponent)


def _to_frames(block: np.ndarray, n_frames: int) -> np.ndarray:
    """Q x T' shifted block -> Q x T frame-aligned block (row q starts at column q)."""
    return np.stack([block[q, q:q + n_frames] for q in range(block.shape[0])])


def _to_shifted(block: np.ndarray, n_steps: int, fill) -> np.ndarray:
    n_q, n_t = block.shape
    out = np.full((n_q, n_steps), fill, dtype=block.dtype)
    for q in range(n_q):
        out[q, q:q + n_t] = block[q]
    return out


def build_weight_matrix(probs: np.ndarray, targets: ShiftedGrid, cfg: LossConfig, step: int = 0) -> FrameWeightMatrix:
    """Weights for every term of a shifted grid, computed without gradient."""
    n_q, n_steps = targets.codes.shape
    pad = ~band_mask(n_q, targets.n_frames)
    if cfg.scheme == "uniform":
        weights = np.ones((n_q, n_steps))
        return FrameWeightMatrix(np.where(pad, 0.0, weights), pad)
    if cfg.scheme == "static_priority":
        weights = np.repeat(static_priority_weights(step, cfg, n_q)[:, None], n_steps, axis=1)
        return FrameWeightMatrix(np.where(pad, 0.0, weights), pad)

    p_tilde, _ = correct_prob(probs, targets.codes, targets.pad_code)
    frame_p = _to_frames(p_tilde, targets.n_frames)
    weights, dropped = apply_pmax(frame_weights(frame_p, cfg.lam), frame_p, cfg.p_max)
    shifted_w = _to_shifted(weights, n_steps, 0.0)
    shifted_m = _to_shifted(dropped, n_steps, False)
    return FrameWeightMatrix(shifted_w, pad | shifted_m)


@dataclass
class LossResult:
    loss: Node
    weights: FrameWeightMatrix
    n_valid: int


def compute_loss(logits: Node, targets: ShiftedGrid, cfg: LossConfig, step: int = 0,
                 weights: Optional[np.ndarray] = None) -> LossResult:
    """
    Weighted cross-entropy over a shifted grid.

    Args:
        logits: (Q, T', K) decoder output
        targets: Shifted target grid
        cfg: Weighting scheme
        step: Training step (static_priority schedule)
        weights: Optional precomputed Q x T' weights overriding cfg

    Returns:
        LossResult with the scalar loss node and the weights used
    """
    n_q, n_steps = targets.codes.shape
    if logits.shape != (n_q, n_steps, targets.codebook_size):
        raise ShapeError(
            f"weighted_ce_loss: logits {logits.shape} do not match targets "
            f"({n_q}, {n_steps}, {targets.codebook_size})"
        )
    if weights is None:
        probs = nx.softmax_array(logits.value.astype(np.float64), axis=-1)
        matrix = build_weight_matrix(probs, targets, cfg, step)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n_q, n_steps):
            raise ShapeError(f"weighted_ce_loss: weights {weights.shape} do not match ({n_q}, {n_steps})")
        pad = ~targets.valid_mask()
        matrix = FrameWeightMatrix(np.where(pad, 0.0, weights), pad)

    n_valid = int(targets.valid_mask().sum())
    ce = nx.cross_entropy_rows(logits, targets.codes, pad_id=targets.pad_code)
    frozen = nx.stop_gradient(matrix.effective().astype(logits.dtype))
    loss = nx.sum(ce * frozen) / max(n_valid, 1)
    return LossResult(loss, matrix, n_valid)


def weighted_ce_loss(logits: Node, targets: ShiftedGrid, cfg: LossConfig, step: int = 0,
                     weights: Optional[np.ndarray] = None) -> Node:
    """Scalar weighted cross-entropy loss (see compute_loss)."""
    return compute_loss(logits, targets, cfg, step, weights).loss


def dump_weights_csv(matrix: FrameWeightMatrix, path: str):
    """Write one row per codebook: q, then weight per shifted column (blank when masked)."""
    ensure_directory_exists(path)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(["codebook"] + [f"t{t + 1}" for t in range(matrix.weights.shape[1])])
        for q in range(matrix.weights.shape[0]):
            row = ["" if matrix.mask[q, t] else f"{matrix.weights[q, t]:.6f}" for t in range(matrix.weights.shape[1])]
            writer.writerow([q + 1] + row)
    logger.debug(f"Wrote weight matrix to {path}")
