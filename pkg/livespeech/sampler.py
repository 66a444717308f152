"""
Per-codebook sampling, delayed-pattern generation and sampler grid search.

The first n_sb codebooks of every step are sampled from the top-k of
softmax(logits / temperature); the remaining codebooks are decoded greedily.
"""

import itertools
import logging
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .codec import CodeGrid
from .exceptions import ConfigError, ShapeError, ValidationError
from .model import ConditionPrefix, Parameters, forward_step, init_state
from .numerics import softmax_array
from .patterns import PatternKind, PatternLayout, ShiftedGrid, band_mask, unshift_delayed

logger = logging.getLogger("livespeech.sampler")

DEFAULT_TEMPERATURES = (1.0, 1.1, 1.2)
DEFAULT_TOP_KS = (10, 15, 20)
DEFAULT_N_SBS = (1, 2, 3, 4, 8, 16)


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    top_k: Union[int, Tuple[int, ...]] = 10
    n_sb: int = 1
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise ConfigError(f"SamplerConfig: temperature must be finite and > 0, got {self.temperature}")
        ks = self.top_k if isinstance(self.top_k, tuple) else (self.top_k,)
        if isinstance(self.top_k, list):
            object.__setattr__(self, "top_k", tuple(self.top_k))
            ks = self.top_k
        if any(int(k) < 1 for k in ks):
            raise ConfigError(f"SamplerConfig: top_k must be >= 1, got {self.top_k}")
        if self.n_sb < 0:
            raise ConfigError(f"SamplerConfig: n_sb must be >= 0, got {self.n_sb}")

    def top_k_for(self, q: int) -> int:
        if isinstance(self.top_k, tuple):
            return int(self.top_k[q])
        return int(self.top_k)

    def check(self, n_codebooks: int):
        if self.n_sb > n_codebooks:
            raise ConfigError(f"SamplerConfig: n_sb {self.n_sb} exceeds {n_codebooks} codebooks")
        if isinstance(self.top_k, tuple) and len(self.top_k) != n_codebooks:
            raise ConfigError(f"SamplerConfig: {len(self.top_k)} top_k values for {n_codebooks} codebooks")

    def to_dict(self):
        data = asdict(self)
        if isinstance(self.top_k, tuple):
            data["top_k"] = list(self.top_k)
        return data

    @classmethod
    def from_dict(cls, data) -> "SamplerConfig":
        data = dict(data)
        if isinstance(data.get("top_k"), list):
            data["top_k"] = tuple(data["top_k"])
        return cls(**data)


def sample_step(logits_t: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Q codes from Q x K logits: top-k sampling for the first n_sb codebooks, argmax for the rest."""
    logits_t = np.asarray(logits_t, dtype=np.float64)
    if logits_t.ndim != 2 or not np.all(np.isfinite(logits_t)):
        raise ValidationError(f"sample_step: expected finite (Q, K) logits, got shape {logits_t.shape}")
    n_q, n_k = logits_t.shape
    cfg.check(n_q)
    codes = np.argmax(logits_t, axis=1)
    for q in range(cfg.n_sb):
        k = min(cfg.top_k_for(q), n_k)
        order = np.argsort(-logits_t[q], kind="stable")[:k]
        probs = softmax_array(logits_t[q, order] / cfg.temperature)
        codes[q] = order[rng.choice(k, p=probs)]
    return codes.astype(np.int64)


@dataclass
class DecodeStep:
    """One shifted column produced by the decoding loop."""
    step: int
    codes: np.ndarray
    duration_s: float


class DelayedDecoder:
    """
    Drives the delayed-pattern decoding loop for a fixed number of frames.

    Iterating yields one DecodeStep per shifted column (T + Q - 1 in total).
    Codes outside the delayed band are forced to PAD before being fed back.
    The time spent running the prefix through the decoder is recorded as
    prefill_s; `started` is the clock reading taken just before it.
    """

    def __init__(self, params: Parameters, condition: ConditionPrefix, max_frames: int,
                 sampler_cfg: SamplerConfig, clock: Callable[[], float] = time.perf_counter,
                 on_step: Optional[Callable[[int], None]] = None):
        config = params.config
        if max_frames < 1:
            raise ValidationError(f"generate: max_frames must be >= 1, got {max_frames}")
        sampler_cfg.check(config.n_codebooks)
        if condition.vectors.shape[-1] != config.d_model:
            raise ShapeError(
                f"generate: condition width {condition.vectors.shape[-1]} does not match d_model {config.d_model}"
            )
        self.params = params
        self.condition = condition
        self.max_frames = max_frames
        self.sampler_cfg = sampler_cfg
        self.clock = clock
        self.on_step = on_step
        self.n_codebooks = config.n_codebooks
        self.n_steps = PatternLayout(PatternKind.DELAYED, config.n_codebooks, config.pad_code).n_steps(max_frames)
        self.columns: List[np.ndarray] = []
        self.prefill_s = 0.0
        self.started = 0.0
        self.decode_start = 0.0
        self._band = band_mask(config.n_codebooks, max_frames)

    def __iter__(self) -> Iterator[DecodeStep]:
        config = self.params.config
        rng = np.random.default_rng(self.sampler_cfg.seed)
        self.started = self.clock()
        logits, state = init_state(self.condition, self.params)
        self.decode_start = self.clock()
        self.prefill_s = self.decode_start - self.started
        for step in range(1, self.n_steps + 1):
            t0 = self.clock()
            codes = sample_step(logits, self.sampler_cfg, rng)
            codes = np.where(self._band[:, step - 1], codes, config.pad_code)
            if step < self.n_steps:
                logits, state = forward_step(state, codes, self.params)
            if self.on_step is not None:
                self.on_step(step)
            duration = self.clock() - t0
            self.columns.append(codes)
            yield DecodeStep(step, codes, duration)

    def shifted_grid(self) -> ShiftedGrid:
        if len(self.columns) != self.n_steps:
            raise ValidationError("DelayedDecoder: decoding loop has not finished")
        return ShiftedGrid(np.stack(self.columns, axis=1), self.params.config.codebook_size, self.max_frames)


def generate(params: Parameters, condition: ConditionPrefix, max_frames: int,
             sampler_cfg: SamplerConfig) -> CodeGrid:
    """Decode T + Q - 1 shifted columns and return the unshifted Q x T grid."""
    decoder = DelayedDecoder(params, condition, max_frames, sampler_cfg)
    for _ in decoder:
        pass
    return unshift_delayed(decoder.shifted_grid())


@dataclass
class GridSearchResult:
    best: SamplerConfig
    best_score: float
    scores: List[Tuple[SamplerConfig, float]]


Objective = Callable[[Sequence[CodeGrid]], float]


def grid_search(params: Parameters, conditions: Sequence[ConditionPrefix], max_frames: Sequence[int],
                objective: Objective, temperatures: Sequence[float] = DEFAULT_TEMPERATURES,
                top_ks: Sequence[int] = DEFAULT_TOP_KS, n_sbs: Sequence[int] = DEFAULT_N_SBS,
                seed: int = 0, progress: bool = False) -> GridSearchResult:
    """
    Exhaustive search over (temperature, top_k, n_sb).

    Every combination decodes the whole validation set with the same seed and
    is scored by objective(grids). The highest score wins; ties go to the
    lower n_sb, then the lower temperature, then the lower top_k.
    """
    if not conditions:
        raise ValidationError("grid_search: validation set is empty")
    if len(conditions) != len(max_frames):
        raise ValidationError("grid_search: conditions and max_frames differ in length")
    if not temperatures or not top_ks or not n_sbs:
        raise ValidationError("grid_search: every search grid must be non-empty")
    n_q = params.config.n_codebooks
    combos = [
        SamplerConfig(temperature=float(t), top_k=int(k), n_sb=int(n), seed=seed)
        for t, k, n in itertools.product(temperatures, top_ks, n_sbs) if n <= n_q
    ]
    if not combos:
        raise ValidationError(f"grid_search: no n_sb value fits {n_q} codebooks")

    scores: List[Tuple[SamplerConfig, float]] = []
    for cfg in tqdm(combos, desc="grid search", disable=not progress):
        grids = [generate(params, cond, frames, cfg) for cond, frames in zip(conditions, max_frames)]
        score = float(objective(grids))
        scores.append((cfg, score))
        logger.debug(f"tau={cfg.temperature} k={cfg.top_k} n_sb={cfg.n_sb}: {score:.4f}")

    def rank(entry: Tuple[SamplerConfig, float]):
        cfg, score = entry
        return (-score, cfg.n_sb, cfg.temperature, cfg.top_k_for(0))

    best, best_score = min(scores, key=rank)
    logger.info(f"Best sampler: tau={best.temperature} k={best.top_k} n_sb={best.n_sb} score={best_score:.4f}")
    return GridSearchResult(replace(best), best_score, scores)
