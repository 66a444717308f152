"""
Builders shared by the test modules.
"""

import numpy as np

from livespeech.codec import FeatureSequence
from livespeech.model import ModelConfig, encode_condition

N_CODEBOOKS = 4
CODEBOOK_SIZE = 8


def tiny_model(**overrides) -> ModelConfig:
    settings = dict(n_layers=2, n_shared=1, n_groups=2, n_codebooks=N_CODEBOOKS, codebook_size=CODEBOOK_SIZE,
                    d_model=16, n_heads=2, d_ff=32, text_vocab=6, cond_len=2, feature_dim=10,
                    max_positions=64, dtype="float64")
    settings.update(overrides)
    return ModelConfig(**settings)


def tiny_prefix(params, text=(1, 3, 2), n_enrol=7, seed=0):
    rng = np.random.default_rng(seed)
    enrol = FeatureSequence(rng.normal(size=(n_enrol, params.config.feature_dim)))
    return encode_condition(np.array(text), enrol, params)
