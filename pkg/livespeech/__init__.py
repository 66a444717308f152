"""
livespeech - codec language model text-to-speech at desk scale

RVQ tokenization, delayed multi-codebook decoding with parallel codebook
group heads, adaptive codebook loss weighting and a streaming harness that
measures real-time factor and first-chunk latency, all on synthetic
speech-like features so every mechanism can be tested.

Example usage:
    >>> import livespeech
    >>> dataset = livespeech.synth_dataset(livespeech.DatasetSpec(n_speakers=4, n_test_speakers=1))
    >>> codebooks = livespeech.train_codec(dataset, livespeech.RunConfig())

For streaming:
    >>> events, report = livespeech.generate_stream(params, prefix, 150, sampler_cfg, codebooks)
    >>> print(report.summary_line())
"""

__version__ = "1.0.0"
__license__ = "MIT"

from .codec import CodeGrid, Codebooks, FeatureSequence, rvq_decode, rvq_encode, train_codebooks
from .config import Config, RunConfig
from .dataset import DatasetSpec, load_dataset, synth_dataset
from .exceptions import LiveSpeechError, TrainingError, ValidationError
from .loss import LossConfig, weighted_ce_loss
from .model import ModelConfig, encode_condition, forward_full, init_params
from .patterns import shift_delayed, unshift_delayed
from .sampler import SamplerConfig, generate, grid_search
from .serialization import load_checkpoint, save_checkpoint
from .streaming import StreamReport, generate_stream
from .training import LMTrainer, train_codec, train_lm

# Make the main classes and functions available at package level
__all__ = [
    "CodeGrid",
    "Codebooks",
    "FeatureSequence",
    "rvq_encode",
    "rvq_decode",
    "train_codebooks",
    "Config",
    "RunConfig",
    "DatasetSpec",
    "synth_dataset",
    "load_dataset",
    "LiveSpeechError",
    "ValidationError",
    "TrainingError",
    "LossConfig",
    "weighted_ce_loss",
    "ModelConfig",
    "init_params",
    "encode_condition",
    "forward_full",
    "shift_delayed",
    "unshift_delayed",
    "SamplerConfig",
    "generate",
    "grid_search",
    "save_checkpoint",
    "load_checkpoint",
    "StreamReport",
    "generate_stream",
    "LMTrainer",
    "train_codec",
    "train_lm",
    "__version__",
]
