"""
Tests for the codebook-weighted cross-entropy.
"""

import csv

import numpy as np
import pytest

from livespeech import numerics as nx
from livespeech.codec import CodeGrid
from livespeech.exceptions import ConfigError, ShapeError, ValidationError
from livespeech.loss import (
    LossConfig,
    apply_pmax,
    build_weight_matrix,
    compute_loss,
    correct_prob,
    dump_weights_csv,
    frame_weights,
    static_priority_weights,
    weighted_ce_loss,
)
from livespeech.patterns import shift_delayed


def _product_oracle(p_tilde, lam):
    """w(q) written directly as a product over earlier codebooks."""
    return np.array([np.prod([p_tilde[j] ** lam for j in range(q)]) for q in range(p_tilde.shape[0])])


def _pmax_oracle(weights, p_tilde, p_max):
    mask = p_tilde > p_max
    kept = np.where(mask, 0.0, weights)
    top = kept.max()
    return (kept / top if top > 0 else np.zeros_like(kept)), mask


def _problem(n_q=4, n_t=6, n_k=8, seed=0):
    rng = np.random.default_rng(seed)
    shifted = shift_delayed(CodeGrid(rng.integers(0, n_k, size=(n_q, n_t)), n_k))
    logits = rng.normal(scale=2.0, size=(n_q, shifted.n_steps, n_k))
    return shifted, logits


class TestFrameWeights:
    """Test cases for the per-frame weight recursion."""

    def test_first_codebook_weight_is_one(self):
        weights = frame_weights(np.array([0.2, 0.5, 0.9]), 1.0)
        np.testing.assert_allclose(weights, [1.0, 0.2, 0.1])

    def test_matches_product_oracle(self):
        """10,000 random frames for lambda in {0, 0.05, 0.1, 1}."""
        rng = np.random.default_rng(0)
        for lam in (0.0, 0.05, 0.1, 1.0):
            for _ in range(2500):
                n_q = int(rng.integers(1, 17))
                p_tilde = rng.uniform(0.0, 1.0, size=n_q)
                if rng.random() < 0.1:
                    p_tilde[rng.integers(n_q)] = 0.0
                np.testing.assert_allclose(frame_weights(p_tilde, lam), _product_oracle(p_tilde, lam),
                                           rtol=1e-12, atol=1e-12)

    def test_block_of_frames(self):
        """Columns of a (Q, F) block are independent frames."""
        rng = np.random.default_rng(1)
        block = rng.uniform(size=(5, 7))
        weights = frame_weights(block, 0.1)
        for f in range(7):
            np.testing.assert_allclose(weights[:, f], _product_oracle(block[:, f], 0.1), rtol=1e-12)

    def test_lambda_zero_gives_ones(self):
        np.testing.assert_array_equal(frame_weights(np.array([0.0, 0.3, 1.0]), 0.0), np.ones(3))


class TestPMax:
    """Test cases for p_max masking and rescaling."""

    def test_matches_mask_then_rescale_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(2000):
            n_q = int(rng.integers(1, 17))
            p_tilde = rng.uniform(size=n_q)
            weights = frame_weights(p_tilde, 0.1)
            p_max = float(rng.choice([0.3, 0.5, 0.9]))
            got, mask = apply_pmax(weights, p_tilde, p_max)
            expected, expected_mask = _pmax_oracle(weights, p_tilde, p_max)
            np.testing.assert_array_equal(mask, expected_mask)
            np.testing.assert_array_equal(got, expected)

    def test_survivors_rescaled(self):
        p_tilde = np.array([0.9, 0.4, 0.2])
        weights = frame_weights(p_tilde, 1.0)
        got, mask = apply_pmax(weights, p_tilde, 0.5)
        assert mask.tolist() == [True, False, False]
        np.testing.assert_allclose(got, [0.0, 1.0, 0.4])

    def test_fully_masked_frame(self):
        got, mask = apply_pmax(np.ones(3), np.array([0.8, 0.9, 0.99]), 0.5)
        assert mask.all()
        np.testing.assert_array_equal(got, np.zeros(3))

    def test_no_pmax_is_identity(self):
        weights = np.array([1.0, 0.5])
        got, mask = apply_pmax(weights, np.array([0.99, 0.99]), None)
        np.testing.assert_array_equal(got, weights)
        assert not mask.any()


class TestWeightMatrix:
    """Test cases for the shifted-grid weight matrix."""

    def test_weights_follow_frames(self):
        """Row q of frame t sits at shifted column t + q and uses that frame's earlier codes."""
        n_q, n_t, n_k = 3, 4, 5
        rng = np.random.default_rng(4)
        grid = CodeGrid(rng.integers(0, n_k, size=(n_q, n_t)), n_k)
        shifted = shift_delayed(grid)
        p_frame = rng.uniform(0.05, 0.95, size=(n_q, n_t))
        probs = np.full((n_q, shifted.n_steps, n_k), 0.0)
        for q in range(n_q):
            for t in range(n_t):
                probs[q, t + q, :] = (1.0 - p_frame[q, t]) / (n_k - 1)
                probs[q, t + q, grid.codes[q, t]] = p_frame[q, t]
        matrix = build_weight_matrix(probs, shifted, LossConfig(scheme="adaptive", lam=0.5))
        for t in range(n_t):
            expected = _product_oracle(p_frame[:, t], 0.5)
            got = [matrix.weights[q, t + q] for q in range(n_q)]
            np.testing.assert_allclose(got, expected, rtol=1e-12)
        np.testing.assert_array_equal(matrix.mask, ~shifted.valid_mask())

    def test_uniform_scheme(self):
        shifted, logits = _problem()
        matrix = build_weight_matrix(nx.softmax_array(logits), shifted, LossConfig.uniform())
        np.testing.assert_array_equal(matrix.effective(), shifted.valid_mask().astype(float))

    def test_static_priority_schedule(self):
        cfg = LossConfig(scheme="static_priority", static_init=(16, 8, 4, 2), total_steps=100)
        np.testing.assert_allclose(static_priority_weights(0, cfg, 6), [16, 8, 4, 2, 1, 1])
        np.testing.assert_allclose(static_priority_weights(50, cfg, 4), [4, 8 ** 0.5, 2, 2 ** 0.5])
        np.testing.assert_allclose(static_priority_weights(100, cfg, 4), np.ones(4))
        np.testing.assert_allclose(static_priority_weights(500, cfg, 4), np.ones(4))

    def test_mean_per_codebook(self):
        shifted, logits = _problem(seed=5)
        cfg = LossConfig(scheme="adaptive", lam=0.1)
        matrix = build_weight_matrix(nx.softmax_array(logits), shifted, cfg)
        means = matrix.mean_per_codebook(shifted.valid_mask())
        assert means[0] == pytest.approx(1.0)
        assert np.all(means[1:] < 1.0)

    def test_dump_csv(self, tmp_path):
        shifted, logits = _problem(n_q=2, n_t=3)
        matrix = build_weight_matrix(nx.softmax_array(logits), shifted, LossConfig(lam=0.1))
        path = tmp_path / "weights.csv"
        dump_weights_csv(matrix, str(path))
        with open(path, newline='') as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["codebook", "t1", "t2", "t3", "t4"]
        assert rows[1][0] == "1" and rows[1][4] == ""
        assert rows[2][1] == "" and float(rows[2][2]) > 0


class TestLoss:
    """Test cases for compute_loss."""

    def test_uniform_equals_mean_cross_entropy(self):
        """Plain mean CE over non-PAD targets."""
        shifted, logits = _problem(seed=6)
        loss = weighted_ce_loss(nx.tensor(logits), shifted, LossConfig.uniform()).item()
        valid = shifted.valid_mask()
        log_probs = np.log(nx.softmax_array(logits))
        safe = np.where(valid, shifted.codes, 0)
        picked = np.take_along_axis(log_probs, safe[..., None], axis=-1)[..., 0]
        assert loss == pytest.approx(-picked[valid].mean(), abs=1e-6)

    def test_adaptive_lambda_zero_is_uniform(self):
        shifted, logits = _problem(seed=7)
        uniform = weighted_ce_loss(nx.tensor(logits), shifted, LossConfig.uniform()).item()
        adaptive = weighted_ce_loss(nx.tensor(logits), shifted, LossConfig(scheme="adaptive", lam=0.0)).item()
        assert adaptive == pytest.approx(uniform, abs=1e-6)

    def test_normalized_by_valid_count(self):
        shifted, logits = _problem(n_q=3, n_t=5)
        result = compute_loss(nx.tensor(logits), shifted, LossConfig())
        assert result.n_valid == 15

    def test_gradient_treats_weights_as_constants(self):
        shifted, logits = _problem(seed=8)
        cfg = LossConfig(scheme="adaptive", lam=0.1, p_max=0.5)
        node = nx.tensor(logits, requires_grad=True)
        result = compute_loss(node, shifted, cfg)
        nx.backward(result.loss)
        frozen = nx.tensor(logits, requires_grad=True)
        nx.backward(compute_loss(frozen, shifted, cfg, weights=result.weights.effective()).loss)
        assert nx.relative_error(node.grad, frozen.grad) < 1e-6

    def test_pad_targets_have_no_gradient(self):
        shifted, logits = _problem(seed=9)
        node = nx.tensor(logits, requires_grad=True)
        nx.backward(compute_loss(node, shifted, LossConfig()).loss)
        pad = ~shifted.valid_mask()
        assert np.all(node.grad[pad] == 0.0)

    def test_shape_mismatch(self):
        shifted, logits = _problem()
        with pytest.raises(ShapeError, match="logits"):
            compute_loss(nx.tensor(logits[:, :-1]), shifted, LossConfig())
        with pytest.raises(ShapeError, match="weights"):
            compute_loss(nx.tensor(logits), shifted, LossConfig(), weights=np.ones((2, 2)))


class TestLossConfig:
    """Test cases for LossConfig validation."""

    def test_rejects_unknown_scheme(self):
        with pytest.raises(ConfigError, match="scheme"):
            LossConfig(scheme="focal")

    def test_rejects_bad_pmax(self):
        with pytest.raises(ConfigError, match="p_max"):
            LossConfig(p_max=0.0)

    def test_dict_round_trip(self):
        cfg = LossConfig(scheme="static_priority", lam=0.2, p_max=0.7, static_init=(4, 2))
        assert LossConfig.from_dict(cfg.to_dict()) == cfg

    def test_correct_prob_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            correct_prob(np.full((2, 3), 1 / 3), np.array([0, 3]))
