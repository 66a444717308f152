"""
Tests for residual vector quantization.
"""

import numpy as np
import pytest

from livespeech.codec import (
    CodeGrid,
    Codebooks,
    FeatureSequence,
    kmeans,
    quantization_error,
    residual_energies,
    rvq_decode,
    rvq_encode,
    train_codebooks,
)
from livespeech.exceptions import ShapeError, ValidationError


def _random_codebooks(rng, n_q=4, n_k=8, dim=5):
    stages = rng.normal(size=(n_q, n_k, dim))
    stages[:, 0, :] = 0.0
    return Codebooks(stages, zero_reserved=True)


class TestEncodeDecode:
    """Test cases for rvq_encode and rvq_decode."""

    def test_nearest_codeword(self):
        """0.6 is closer to (1, 0) than to the origin."""
        cb = Codebooks(np.array([[[0.0, 0.0], [1.0, 0.0]]]))
        grid = rvq_encode(FeatureSequence(np.array([[0.6, 0.0]])), cb)
        assert grid.codes.tolist() == [[1]]
        np.testing.assert_allclose(residual_energies(FeatureSequence(np.array([[0.6, 0.0]])), cb)[1], [0.16],
                                   atol=1e-6)

    def test_two_stage_hand_trace(self):
        """Stages {0, 1} then {-0.4, 0.25} represent 0.6 exactly."""
        cb = Codebooks(np.array([[[0.0], [1.0]], [[-0.4], [0.25]]]), zero_reserved=False)
        z = FeatureSequence(np.array([[0.6]]))
        grid = rvq_encode(z, cb)
        assert grid.codes[:, 0].tolist() == [1, 0]
        np.testing.assert_allclose(rvq_decode(grid, cb).frames, [[0.6]], atol=1e-6)
        assert quantization_error(z, cb) < 1e-12

    def test_zero_frame_encodes_to_zero(self):
        rng = np.random.default_rng(1)
        cb = _random_codebooks(rng)
        grid = rvq_encode(FeatureSequence(np.zeros((3, 5))), cb)
        assert np.all(grid.codes == 0)
        np.testing.assert_array_equal(rvq_decode(CodeGrid(np.zeros((4, 3)), 8), cb).frames, np.zeros((3, 5)))

    def test_ties_go_to_lowest_index(self):
        """A point equidistant from two codewords picks the first."""
        cb = Codebooks(np.array([[[0.0], [-1.0], [1.0]]]))
        assert rvq_encode(FeatureSequence(np.array([[0.0], [2.0], [-0.5]])), cb).codes.tolist() == [[0, 2, 0]]

    def test_residual_monotonicity(self):
        """With zero_reserved, per-frame error never grows with more stages (1,000 frames)."""
        rng = np.random.default_rng(7)
        cb = _random_codebooks(rng, n_q=6, n_k=16, dim=8)
        z = FeatureSequence(rng.normal(scale=2.0, size=(1000, 8)))
        energies = residual_energies(z, cb)
        assert np.all(np.diff(energies, axis=0) <= 1e-6)
        grid = rvq_encode(z, cb)
        errors = [np.sum((rvq_decode(grid, cb, q).frames - z.frames) ** 2, axis=1) for q in range(1, 7)]
        assert np.all(np.diff(np.stack(errors), axis=0) <= 1e-4)

    def test_quantization_error_matches_decode(self):
        rng = np.random.default_rng(3)
        cb = _random_codebooks(rng)
        z = FeatureSequence(rng.normal(size=(20, 5)))
        for q_used in (1, 2, 4):
            decoded = rvq_decode(rvq_encode(z, cb), cb, q_used)
            mse = np.mean((decoded.frames.astype(np.float64) - z.frames) ** 2)
            assert quantization_error(z, cb, q_used) == pytest.approx(mse, rel=1e-4)

    def test_dimension_mismatch(self):
        cb = _random_codebooks(np.random.default_rng(0))
        with pytest.raises(ShapeError, match="dimension"):
            rvq_encode(FeatureSequence(np.zeros((2, 3))), cb)

    def test_decode_rejects_pad(self):
        cb = _random_codebooks(np.random.default_rng(0))
        grid = CodeGrid(np.full((4, 2), 8), 8)
        with pytest.raises(ValidationError, match="PAD"):
            rvq_decode(grid, cb)

    def test_decode_rejects_q_used(self):
        cb = _random_codebooks(np.random.default_rng(0))
        grid = CodeGrid(np.zeros((4, 2)), 8)
        with pytest.raises(ValidationError, match="q_used"):
            rvq_decode(grid, cb, 5)


class TestTraining:
    """Test cases for codebook training."""

    def test_identical_frames(self):
        """A corpus of one repeated frame is captured by stage 1."""
        frame = np.array([[0.3, -1.2, 2.0]])
        corpus = [FeatureSequence(np.repeat(frame, 10, axis=0))]
        cb = train_codebooks(corpus, n_codebooks=2, codebook_size=2, seed=0)
        np.testing.assert_allclose(cb.stages[0, 1], frame[0], atol=1e-6)
        assert np.all(residual_energies(corpus[0], cb)[1] < 1e-10)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        corpus = [FeatureSequence(rng.normal(size=(60, 4))) for _ in range(3)]
        a = train_codebooks(corpus, 3, 8, seed=11)
        b = train_codebooks(corpus, 3, 8, seed=11)
        assert a == b
        assert np.all(a.stages[:, 0, :] == 0)

    def test_later_stages_reduce_energy(self):
        rng = np.random.default_rng(6)
        corpus = [FeatureSequence(rng.normal(size=(200, 4)))]
        cb = train_codebooks(corpus, 2, 16, seed=0)
        energies = residual_energies(corpus[0], cb).mean(axis=1)
        assert energies[2] <= energies[1] <= energies[0]

    def test_rejects_empty_corpus(self):
        with pytest.raises(ValidationError, match="empty"):
            train_codebooks([], 2, 4, seed=0)

    def test_rejects_oversized_codebook(self):
        corpus = [FeatureSequence(np.zeros((3, 2)))]
        with pytest.raises(ValidationError, match="codebook size"):
            train_codebooks(corpus, 1, 4, seed=0)

    def test_kmeans_pinned_zero(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 3)) + 5.0
        centroids = kmeans(x, 4, rng, pin_zero=True)
        np.testing.assert_array_equal(centroids[0], np.zeros(3))


class TestTypes:
    """Test cases for codec value types."""

    def test_feature_sequence_validation(self):
        with pytest.raises(ShapeError):
            FeatureSequence(np.zeros(4))
        with pytest.raises(ValidationError, match="non-finite"):
            FeatureSequence(np.array([[np.nan]]))

    def test_crop(self):
        seq = FeatureSequence(np.arange(12.0).reshape(6, 2), 50.0)
        assert seq.crop(4).n_frames == 4
        assert seq.crop(100).n_frames == 6
        assert seq.duration_s == pytest.approx(0.12)

    def test_zero_reserved_enforced(self):
        with pytest.raises(ValidationError, match="zero_reserved"):
            Codebooks(np.ones((1, 2, 2)), zero_reserved=True)

    def test_code_grid_range(self):
        with pytest.raises(ValidationError, match="PAD"):
            CodeGrid(np.array([[0, 5]]), 4)
