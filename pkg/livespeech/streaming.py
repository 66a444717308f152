"""
Streaming generation with real-time factor and latency accounting.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .codec import CodeGrid, Codebooks, FeatureSequence, rvq_decode
from .exceptions import StateError, ValidationError
from .model import ConditionPrefix, Parameters
from .patterns import column_frames, frame_completion_index, unshift_delayed
from .sampler import DelayedDecoder, SamplerConfig
from .utils import ensure_directory_exists, format_ms

logger = logging.getLogger("livespeech.streaming")


class Pacing(str, Enum):
    OFF = "off"
    REAL_TIME = "real_time"


@dataclass
class StreamEvent:
    step: int
    completed_frame: Optional[int]
    codes: np.ndarray
    chunk: Optional[FeatureSequence]
    t_wall: float


@dataclass
class StreamReport:
    """Timings of one streamed generation. All durations are in seconds; compute_s includes prefill_s."""
    frames: int
    n_codebooks: int
    frame_rate_hz: float
    pacing: str
    prefill_s: float
    first_chunk_latency_s: float
    compute_s: float
    step_durations: List[float] = field(default_factory=list)

    @property
    def audio_s(self) -> float:
        return self.frames / self.frame_rate_hz

    @property
    def rtf(self) -> float:
        return self.compute_s / self.audio_s

    def step_percentile(self, pct: float) -> float:
        return float(np.percentile(self.step_durations, pct)) if self.step_durations else 0.0

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.update(
            rtf=self.rtf,
            audio_s=self.audio_s,
            step_p50_s=self.step_percentile(50),
            step_p95_s=self.step_percentile(95),
        )
        return data

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path:
            ensure_directory_exists(path)
            with open(path, 'w', encoding='utf-8') as f:
                f.write(text + "\n")
        return text

    def summary_line(self) -> str:
        return (f"frames={self.frames} rtf={self.rtf:.3f} latency={format_ms(self.first_chunk_latency_s)} "
                f"p50={format_ms(self.step_percentile(50))} p95={format_ms(self.step_percentile(95))}")


class StreamSession:
    """
    One streamed generation.

    Iterate to receive a StreamEvent per decoding step; frame i is decoded and
    emitted at step i + Q - 1, once all of its Q codes exist. After the loop,
    `report` holds the timings and `code_grid()` the generated codes.

    Wall time is measured from the moment the prefix enters the decoder, so
    first-chunk latency and compute both include the prefill pass; prefill_s
    is also reported on its own. Encoding the condition happens before the
    session and is not counted. With real_time pacing each step waits until
    start + step / frame_rate. Step durations are taken before any wait, and
    RTF counts compute time only.
    """

    def __init__(self, params: Parameters, condition: ConditionPrefix, max_frames: int,
                 sampler_cfg: SamplerConfig, codebooks: Codebooks, pacing: Pacing = Pacing.OFF,
                 frame_rate_hz: float = 75.0, clock: Callable[[], float] = time.perf_counter,
                 sleep: Callable[[float], None] = time.sleep,
                 on_step: Optional[Callable[[int], None]] = None):
        config = params.config
        if (codebooks.n_codebooks, codebooks.codebook_size) != (config.n_codebooks, config.codebook_size):
            raise ValidationError(
                f"generate_stream: codebooks are {codebooks.n_codebooks}x{codebooks.codebook_size}, "
                f"model expects {config.n_codebooks}x{config.codebook_size}"
            )
        if frame_rate_hz <= 0:
            raise ValidationError(f"generate_stream: frame rate must be positive, got {frame_rate_hz}")
        self.pacing = Pacing(pacing)
        self.codebooks = codebooks
        self.frame_rate_hz = frame_rate_hz
        self.clock = clock
        self.sleep = sleep
        self.decoder = DelayedDecoder(params, condition, max_frames, sampler_cfg, clock=clock, on_step=on_step)
        self.report: Optional[StreamReport] = None

    def _chunk(self, column: np.ndarray) -> FeatureSequence:
        grid = CodeGrid(column[:, None], self.codebooks.codebook_size)
        return rvq_decode(grid, self.codebooks, frame_rate_hz=self.frame_rate_hz)

    def __iter__(self) -> Iterator[StreamEvent]:
        if self.report is not None:
            raise StateError("generate_stream: session has already run")
        n_q, n_t = self.decoder.n_codebooks, self.decoder.max_frames
        durations: List[float] = []
        compute = 0.0
        first_chunk: Optional[float] = None
        # frame -> its Q codes, filled row by row as the shifted columns arrive
        pending: Dict[int, np.ndarray] = {}
        for decoded in self.decoder:
            t0 = self.decoder.started
            durations.append(decoded.duration_s)
            compute += decoded.duration_s
            for q, owner in enumerate(column_frames(decoded.step, n_q, n_t)):
                if owner:
                    pending.setdefault(int(owner), np.empty(n_q, dtype=np.int64))[q] = decoded.codes[q]
            frame = frame_completion_index(decoded.step, n_q)
            chunk = None
            if frame is not None:
                started = self.clock()
                chunk = self._chunk(pending.pop(frame))
                compute += self.clock() - started
            if self.pacing == Pacing.REAL_TIME:
                wait = t0 + decoded.step / self.frame_rate_hz - self.clock()
                if wait > 0:
                    self.sleep(wait)
            t_wall = self.clock() - t0
            if frame is not None and first_chunk is None:
                first_chunk = t_wall
            yield StreamEvent(decoded.step, frame, decoded.codes, chunk, t_wall)

        self.report = StreamReport(
            frames=n_t,
            n_codebooks=n_q,
            frame_rate_hz=self.frame_rate_hz,
            pacing=self.pacing.value,
            prefill_s=self.decoder.prefill_s,
            first_chunk_latency_s=float(first_chunk),
            compute_s=self.decoder.prefill_s + compute,
            step_durations=durations,
        )
        logger.info(f"Stream finished: {self.report.summary_line()}")

    def code_grid(self) -> CodeGrid:
        return unshift_delayed(self.decoder.shifted_grid())


def generate_stream(params: Parameters, condition: ConditionPrefix, max_frames: int,
                    sampler_cfg: SamplerConfig, codebooks: Codebooks, pacing: Pacing = Pacing.OFF,
                    frame_rate_hz: float = 75.0, clock: Callable[[], float] = time.perf_counter,
                    sleep: Callable[[float], None] = time.sleep,
                    on_step: Optional[Callable[[int], None]] = None) -> Tuple[List[StreamEvent], StreamReport]:
    """Run a whole streamed generation and collect its events and report."""
    session = StreamSession(params, condition, max_frames, sampler_cfg, codebooks, pacing,
                            frame_rate_hz, clock, sleep, on_step)
    events = list(session)
    return events, session.report
