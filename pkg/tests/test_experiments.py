"""
Loss-scheme trade-off runner and the directional experiments on the desk
setup. The long runs are marked slow; deselect with -m "not slow".
"""

import json

import pytest

from livespeech.codec import CodecConfig, train_codebooks
from livespeech.config import EvalConfig, OptimConfig, PathsConfig, RunConfig
from livespeech.dataset import DatasetSpec, synth_dataset
from livespeech.evaluation import codec_reference
from livespeech.exceptions import ValidationError
from livespeech.experiments import (
    TRADEOFF_SCHEMES,
    TradeoffResult,
    TradeoffRow,
    run_tradeoff,
    scheme_loss,
    tradeoff_direction,
)
from livespeech.model import ModelConfig
from livespeech.sampler import SamplerConfig

N_CODEBOOKS = 8


def _row(seed, scheme, ser, sim):
    return TradeoffRow(seed=seed, scheme=scheme, ser=ser, speaker_sim=sim, final_loss=1.0,
                       per_codebook_accuracy=[0.5] * 4)


class TestTradeoffDirection:
    """Test cases for the per-seed direction check."""

    def test_expected_direction(self):
        rows = [_row(0, "uniform", 0.4, 0.9), _row(0, "adaptive", 0.2, 0.9), _row(0, "static_priority", 0.1, 0.8)]
        assert tradeoff_direction(rows) == {0: True}

    def test_weighted_arm_not_better_than_uniform(self):
        rows = [_row(0, "uniform", 0.2, 0.9), _row(0, "adaptive", 0.2, 0.9), _row(0, "static_priority", 0.1, 0.8)]
        assert tradeoff_direction(rows) == {0: False}

    def test_static_keeps_more_speaker_detail(self):
        rows = [_row(0, "uniform", 0.4, 0.7), _row(0, "adaptive", 0.2, 0.9), _row(0, "static_priority", 0.1, 0.8)]
        assert tradeoff_direction(rows) == {0: False}

    def test_equal_speaker_similarity_counts(self):
        rows = [_row(3, "uniform", 0.4, 0.8), _row(3, "adaptive", 0.3, 0.8), _row(3, "static_priority", 0.3, 0.8)]
        assert tradeoff_direction(rows) == {3: True}

    def test_missing_arm(self):
        with pytest.raises(ValidationError, match="static_priority"):
            tradeoff_direction([_row(0, "uniform", 0.4, 0.9), _row(0, "adaptive", 0.2, 0.9)])

    def test_majority_of_seeds(self):
        assert TradeoffResult([], {0: True, 1: False, 2: True}).holds
        assert not TradeoffResult([], {0: True, 1: False, 2: False}).holds
        assert not TradeoffResult([], {0: True, 1: False}).holds


class TestSchemeLoss:
    """Test cases for the per-arm loss settings."""

    def test_arms(self):
        uniform, adaptive, static = (scheme_loss(s, 500) for s in TRADEOFF_SCHEMES)
        assert (uniform.scheme, uniform.lam) == ("uniform", 0.0)
        assert (adaptive.lam, adaptive.p_max) == (0.1, 0.5)
        assert static.static_init == (16.0, 8.0, 4.0, 2.0)
        assert {uniform.total_steps, adaptive.total_steps, static.total_steps} == {500}

    def test_unknown_scheme(self):
        with pytest.raises(ValidationError, match="unknown scheme"):
            scheme_loss("curriculum", 10)


class TestRunTradeoff:
    """Test cases for the runner on the tiny setup."""

    def test_runs_every_arm_and_writes_summary(self, run_config, tmp_path):
        out = tmp_path / "tradeoff"
        result = run_tradeoff(run_config, [0], str(out), steps=2)

        assert [(r.seed, r.scheme) for r in result.rows] == [(0, s) for s in TRADEOFF_SCHEMES]
        assert set(result.direction) == {0}
        for row in result.rows:
            assert 0.0 <= row.ser <= 1.0
            assert len(row.per_codebook_accuracy) == run_config.model.n_codebooks
            assert (out / "seed0" / row.scheme / "last.lspc").exists()
            assert (out / "seed0" / row.scheme / "eval" / "report.json").exists()

        summary = json.loads((out / "tradeoff.json").read_text())
        assert len(summary["rows"]) == 3
        assert summary["holds"] == result.holds
        header = (out / "tradeoff.csv").read_text().splitlines()[0]
        assert header.startswith("seed,scheme,ser,speaker_sim,final_loss,acc_q1")

    def test_needs_a_seed(self, run_config, tmp_path):
        with pytest.raises(ValidationError, match="at least one seed"):
            run_tradeoff(run_config, [], str(tmp_path))


def _codec_trend(seed):
    spec = DatasetSpec(n_speakers=12, n_test_speakers=3, utterances_per_speaker=4, seed=seed)
    dataset = synth_dataset(spec)
    corpus = [u.features for u in dataset.split("train")]
    codebooks = train_codebooks(corpus, N_CODEBOOKS, 64, seed=seed)
    sweep = codec_reference(dataset, codebooks, dataset.split("test"))["sweep"]
    ser = [row["ser"] for row in sweep]
    sim = [row["speaker_sim"] for row in sweep]
    half = N_CODEBOOKS // 2
    saturated = ser[2] <= ser[-1] + 0.05
    improving = all(b > a for a, b in zip(sim[:half], sim[1:half]))
    return saturated and improving


@pytest.mark.slow
def test_symbols_saturate_early_while_speaker_keeps_improving():
    """Content is carried by the first codebooks, speaker detail by the later ones."""
    wins = sum(_codec_trend(seed) for seed in range(3))
    assert wins >= 2


def _desk_run(tmp_path):
    spec = DatasetSpec(symbol_vocab=8, theta_dim=4, frames_per_symbol=(3, 5), text_len=(3, 6), feature_dim=12,
                       n_speakers=10, n_test_speakers=2, utterances_per_speaker=4)
    model = ModelConfig(n_layers=2, n_shared=1, n_groups=2, n_codebooks=N_CODEBOOKS, codebook_size=16,
                        d_model=32, n_heads=2, d_ff=64, text_vocab=8, cond_len=2, feature_dim=12,
                        max_positions=128)
    return RunConfig(
        model=model,
        sampler=SamplerConfig(temperature=1.0, top_k=4, n_sb=1),
        optim=OptimConfig(lr=3e-3, min_lr=3e-4, warmup_steps=30, total_steps=400, batch_size=4,
                          log_every=50, eval_every=100, eval_utterances=4),
        dataset=spec,
        codec=CodecConfig(n_codebooks=N_CODEBOOKS, codebook_size=16),
        eval=EvalConfig(enrollment_frames=(20, 40), max_utterances=4, stream_frames=8),
        paths=PathsConfig(run_dir=str(tmp_path / "lm")),
    )


@pytest.mark.slow
def test_weighted_losses_trade_speaker_detail_for_content(tmp_path):
    """Adaptive and static weighting lower symbol error; uniform keeps at least the static speaker similarity."""
    result = run_tradeoff(_desk_run(tmp_path), [0, 1, 2], str(tmp_path / "tradeoff"))
    assert len(result.rows) == 9
    assert result.holds, result.to_dict()
