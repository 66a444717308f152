"""
Synthetic speech-like corpus.

Every utterance is a symbol sequence rendered frame by frame. A symbol owns a
prototype vector in a content subspace; the speaker vector theta scales and
tilts that prototype and is added, slowly modulated, in an orthogonal speaker
subspace:

    frame_t = U_c (gain(theta) * tilt(theta) * proto[s_t])
            + U_s (0.5 * theta * (1 + 0.1 sin(2 pi rate(theta) t / frame_rate)))
            + noise

theta[0] sets the base level, theta[1] the spectral tilt, theta[2] the
modulation rate and the remaining entries the timbre mix.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .codec import FeatureSequence
from .exceptions import DatasetError
from .utils import derive_rng, format_bytes, resolve_threads

logger = logging.getLogger("livespeech.dataset")

SPEAKER_SCALE = 0.5
MODULATION_DEPTH = 0.1
FEATURES_FILE = "features.npz"
METADATA_FILE = "metadata.json"
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class DatasetSpec:
    symbol_vocab: int = 26
    theta_dim: int = 6
    frames_per_symbol: Tuple[int, int] = (3, 10)
    text_len: Tuple[int, int] = (4, 12)
    feature_dim: int = 16
    frame_rate_hz: float = 75.0
    n_speakers: int = 24
    n_test_speakers: int = 4
    utterances_per_speaker: int = 8
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frames_per_symbol", tuple(int(v) for v in self.frames_per_symbol))
        object.__setattr__(self, "text_len", tuple(int(v) for v in self.text_len))
        if self.n_speakers < 1:
            raise DatasetError(f"DatasetSpec: need at least one speaker, got {self.n_speakers}")
        if not 0 <= self.n_test_speakers < self.n_speakers:
            raise DatasetError(
                f"DatasetSpec: n_test_speakers must lie in [0, {self.n_speakers - 1}], got {self.n_test_speakers}"
            )
        if self.utterances_per_speaker < 2:
            raise DatasetError("DatasetSpec: every speaker needs at least two utterances (one for enrollment)")
        if self.symbol_vocab < 2:
            raise DatasetError(f"DatasetSpec: symbol_vocab must be >= 2, got {self.symbol_vocab}")
        if not 4 <= self.theta_dim <= 8:
            raise DatasetError(f"DatasetSpec: theta_dim must lie in [4, 8], got {self.theta_dim}")
        if self.feature_dim - self.theta_dim < 2:
            raise DatasetError(
                f"DatasetSpec: feature_dim {self.feature_dim} leaves no room for content next to theta_dim {self.theta_dim}"
            )
        for name in ("frames_per_symbol", "text_len"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise DatasetError(f"DatasetSpec: {name} must be a range 1 <= lo <= hi, got {(lo, hi)}")
        if self.noise_std < 0 or self.frame_rate_hz <= 0:
            raise DatasetError("DatasetSpec: noise_std must be >= 0 and frame_rate_hz > 0")

    @property
    def content_dim(self) -> int:
        return self.feature_dim - self.theta_dim

    def test_speakers(self) -> Tuple[int, ...]:
        return tuple(range(self.n_speakers - self.n_test_speakers, self.n_speakers))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["frames_per_symbol"] = list(self.frames_per_symbol)
        data["text_len"] = list(self.text_len)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetSpec":
        return cls(**data)


class SpeechWorld:
    """The fixed generator behind a DatasetSpec: subspaces and symbol prototypes."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        rng = derive_rng(spec.seed, 0)
        basis, _ = np.linalg.qr(rng.normal(size=(spec.feature_dim, spec.feature_dim)))
        self.content_basis = basis[:, :spec.content_dim]
        self.speaker_basis = basis[:, spec.content_dim:]
        self.prototypes = rng.normal(size=(spec.symbol_vocab, spec.content_dim))
        self._ramp = np.linspace(-1.0, 1.0, spec.content_dim)

    def speaker_theta(self, speaker: int) -> np.ndarray:
        return derive_rng(self.spec.seed, 1, speaker).normal(size=self.spec.theta_dim)

    def gain(self, theta: np.ndarray) -> float:
        return float(np.exp(0.3 * np.tanh(theta[0])))

    def tilt(self, theta: np.ndarray) -> np.ndarray:
        return np.exp(0.2 * np.tanh(theta[1]) * self._ramp)

    def modulation(self, theta: np.ndarray, n_frames: int) -> np.ndarray:
        rate = 3.0 + 2.0 * np.tanh(theta[2])
        t = np.arange(n_frames) / self.spec.frame_rate_hz
        return 1.0 + MODULATION_DEPTH * np.sin(2.0 * np.pi * rate * t)

    def render(self, text: Sequence[int], theta: np.ndarray, durations: Sequence[int],
               noise_std: float = 0.0, rng: Optional[np.random.Generator] = None) -> FeatureSequence:
        """Features for `text` spoken by `theta`, symbol i lasting durations[i] frames."""
        text = np.asarray(text, dtype=np.int64)
        if text.size == 0:
            raise DatasetError("render: text must contain at least one symbol")
        if len(durations) != text.size or min(durations) < 1:
            raise DatasetError("render: need one positive duration per symbol")
        symbols = np.repeat(text, durations)
        content = self.prototypes[symbols] * self.gain(theta) * self.tilt(theta)
        speaker = SPEAKER_SCALE * np.outer(self.modulation(theta, symbols.size), theta)
        frames = content @ self.content_basis.T + speaker @ self.speaker_basis.T
        if noise_std > 0:
            if rng is None:
                raise DatasetError("render: noise requires a random generator")
            frames = frames + rng.normal(0.0, noise_std, size=frames.shape)
        return FeatureSequence(frames.astype(np.float32), self.spec.frame_rate_hz)


@lru_cache(maxsize=8)
def world_for(spec: DatasetSpec) -> SpeechWorld:
    return SpeechWorld(spec)


@dataclass
class Utterance:
    utt_id: str
    speaker_id: int
    text: np.ndarray
    theta: np.ndarray
    features: FeatureSequence
    enrollment_of: str
    split: str
    durations: List[int] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.features.n_frames


def _sample_text(rng: np.random.Generator, spec: DatasetSpec) -> np.ndarray:
    # no symbol repeats its predecessor, so collapsing repeated frames is lossless
    length = int(rng.integers(spec.text_len[0], spec.text_len[1] + 1))
    text = [int(rng.integers(spec.symbol_vocab))]
    for _ in range(length - 1):
        text.append((text[-1] + 1 + int(rng.integers(spec.symbol_vocab - 1))) % spec.symbol_vocab)
    return np.array(text, dtype=np.int64)


def utterance_id(speaker: int, index: int) -> str:
    return f"s{speaker:03d}_u{index:03d}"


def _split_of(spec: DatasetSpec, speaker: int, index: int) -> str:
    if speaker in spec.test_speakers():
        return "test"
    return "valid" if index == spec.utterances_per_speaker - 1 else "train"


class Dataset:
    """Utterances of one DatasetSpec, addressable by id and split."""

    def __init__(self, spec: DatasetSpec, utterances: List[Utterance]):
        self.spec = spec
        self.utterances = utterances
        self.world = world_for(spec)
        self._by_id = {u.utt_id: u for u in utterances}

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, utt_id: str) -> Utterance:
        try:
            return self._by_id[utt_id]
        except KeyError:
            raise DatasetError(f"Dataset: unknown utterance {utt_id!r}")

    def split(self, name: str) -> List[Utterance]:
        if name not in SPLITS:
            raise DatasetError(f"Dataset: unknown split {name!r}, expected one of {SPLITS}")
        return [u for u in self.utterances if u.split == name]

    def speakers(self, name: str) -> set:
        return {u.speaker_id for u in self.split(name)}

    def enrollment(self, utt: Utterance) -> Utterance:
        enrol = self[utt.enrollment_of]
        if enrol.utt_id == utt.utt_id:
            raise DatasetError(f"Dataset: {utt.utt_id} cannot serve as its own enrollment")
        if enrol.speaker_id != utt.speaker_id:
            raise DatasetError(f"Dataset: enrollment {enrol.utt_id} belongs to another speaker than {utt.utt_id}")
        return enrol

    def check_zero_shot(self):
        """Test speakers must never appear in the training or validation splits."""
        seen = self.speakers("train") | self.speakers("valid")
        overlap = seen & self.speakers("test")
        if overlap:
            raise DatasetError(f"Dataset: test speakers {sorted(overlap)} also appear in training data")


def _make_utterance(world: SpeechWorld, speaker: int, index: int) -> Utterance:
    spec = world.spec
    rng = derive_rng(spec.seed, 2, speaker, index)
    text = _sample_text(rng, spec)
    durations = [int(d) for d in rng.integers(spec.frames_per_symbol[0], spec.frames_per_symbol[1] + 1,
                                              size=text.size)]
    theta = world.speaker_theta(speaker)
    features = world.render(text, theta, durations, spec.noise_std, rng)
    enrol_index = (index + 1) % spec.utterances_per_speaker
    return Utterance(utterance_id(speaker, index), speaker, text, theta, features,
                     utterance_id(speaker, enrol_index), _split_of(spec, speaker, index), durations)


def synth_dataset(spec: DatasetSpec, out_dir: Optional[str] = None, threads: Optional[int] = None,
                  progress: bool = False) -> Dataset:
    """
    Generate the corpus, check the oracle on noise-free renders and optionally write it.

    Each utterance draws from its own seed stream, so the worker count does
    not change the output.
    """
    from .metrics import oracle_symbol_error_rate

    world = world_for(spec)
    jobs = [(s, i) for s in range(spec.n_speakers) for i in range(spec.utterances_per_speaker)]
    workers = resolve_threads(threads)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        utterances = list(tqdm(pool.map(lambda job: _make_utterance(world, *job), jobs),
                               total=len(jobs), desc="synth", disable=not progress))

    for utt in utterances:
        clean = world.render(utt.text, utt.theta, utt.durations)
        ser = oracle_symbol_error_rate(clean, utt.text, world)
        if ser != 0.0:
            raise DatasetError(f"synth_dataset: oracle misreads clean utterance {utt.utt_id} (SER {ser:.3f})")

    dataset = Dataset(spec, utterances)
    dataset.check_zero_shot()
    logger.info(
        f"Synthesized {len(utterances)} utterances from {spec.n_speakers} speakers "
        f"({sum(u.n_frames for u in utterances)} frames, {workers} workers)"
    )
    if out_dir:
        save_dataset(dataset, out_dir)
    return dataset


def save_dataset(dataset: Dataset, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    np.savez(os.path.join(out_dir, FEATURES_FILE), **{u.utt_id: u.features.frames for u in dataset.utterances})
    metadata = {
        "spec": dataset.spec.to_dict(),
        "utterances": [
            {
                "id": u.utt_id,
                "speaker": u.speaker_id,
                "text": u.text.tolist(),
                "theta": u.theta.tolist(),
                "durations": u.durations,
                "enrollment_of": u.enrollment_of,
                "split": u.split,
                "n_frames": u.n_frames,
            }
            for u in dataset.utterances
        ],
    }
    with open(os.path.join(out_dir, METADATA_FILE), 'w', encoding='utf-8') as f:
        json.dump(metadata, f, indent=2)
    size = os.path.getsize(os.path.join(out_dir, FEATURES_FILE))
    logger.info(f"Wrote dataset to {out_dir} ({len(dataset.utterances)} utterances, features {format_bytes(size)})")


def load_dataset(data_dir: str) -> Dataset:
    """Read a dataset written by synth_dataset and re-check the zero-shot split."""
    meta_path = os.path.join(data_dir, METADATA_FILE)
    feat_path = os.path.join(data_dir, FEATURES_FILE)
    if not os.path.exists(meta_path) or not os.path.exists(feat_path):
        raise DatasetError(f"load_dataset: {data_dir} does not contain {METADATA_FILE} and {FEATURES_FILE}")
    try:
        with open(meta_path, 'r', encoding='utf-8') as f:
            metadata = json.load(f)
        spec = DatasetSpec.from_dict(metadata["spec"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetError(f"load_dataset: invalid metadata in {meta_path}: {e}")

    utterances = []
    with np.load(feat_path) as archive:
        for entry in metadata["utterances"]:
            if entry["id"] not in archive:
                raise DatasetError(f"load_dataset: features for {entry['id']} are missing")
            features = FeatureSequence(archive[entry["id"]], spec.frame_rate_hz)
            if features.n_frames != entry["n_frames"] or features.dim != spec.feature_dim:
                raise DatasetError(f"load_dataset: features for {entry['id']} have shape {features.frames.shape}")
            utterances.append(Utterance(
                entry["id"], int(entry["speaker"]), np.array(entry["text"], dtype=np.int64),
                np.array(entry["theta"], dtype=np.float64), features, entry["enrollment_of"],
                entry["split"], list(entry["durations"]),
            ))
    dataset = Dataset(spec, utterances)
    dataset.check_zero_shot()
    return dataset
