"""
Shared fixtures: a tiny decoder, a small synthetic corpus and its codec.
"""

import pytest

from livespeech.codec import CodecConfig, train_codebooks
from livespeech.config import EvalConfig, OptimConfig, PathsConfig, RunConfig
from livespeech.dataset import DatasetSpec, synth_dataset
from livespeech.loss import LossConfig
from livespeech.model import init_params
from livespeech.sampler import SamplerConfig

from .helpers import CODEBOOK_SIZE, N_CODEBOOKS, tiny_model


@pytest.fixture
def model_config():
    return tiny_model()


@pytest.fixture
def params(model_config):
    return init_params(model_config, seed=0)


@pytest.fixture(scope="session")
def dataset_spec():
    return DatasetSpec(symbol_vocab=6, theta_dim=4, frames_per_symbol=(3, 5), text_len=(3, 5), feature_dim=10,
                       n_speakers=5, n_test_speakers=1, utterances_per_speaker=3, noise_std=0.02, seed=0)


@pytest.fixture(scope="session")
def dataset(dataset_spec):
    return synth_dataset(dataset_spec, threads=2)


@pytest.fixture(scope="session")
def codebooks(dataset):
    corpus = [u.features for u in dataset.split("train")]
    return train_codebooks(corpus, N_CODEBOOKS, CODEBOOK_SIZE, seed=0)


@pytest.fixture
def run_config(dataset_spec, tmp_path):
    return RunConfig(
        model=tiny_model(dtype="float32"),
        loss=LossConfig(scheme="adaptive", lam=0.1, p_max=0.5, total_steps=6),
        sampler=SamplerConfig(temperature=1.0, top_k=3, n_sb=1, seed=0),
        optim=OptimConfig(lr=1e-2, min_lr=1e-3, warmup_steps=2, total_steps=6, batch_size=2,
                          log_every=1, eval_every=3, eval_utterances=2),
        dataset=dataset_spec,
        codec=CodecConfig(n_codebooks=N_CODEBOOKS, codebook_size=CODEBOOK_SIZE),
        eval=EvalConfig(enrollment_frames=(10, 20), max_utterances=1, stream_frames=6),
        paths=PathsConfig(data_dir=str(tmp_path / "data"), codec_path=str(tmp_path / "codec.rvq"),
                          tokens_dir=str(tmp_path / "tokens"), run_dir=str(tmp_path / "lm")),
        seed=0,
    )
