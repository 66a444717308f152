"""
Tests for the autodiff engine.
"""

import numpy as np
import pytest

from livespeech import numerics as nx
from livespeech.exceptions import NumericsError, ShapeError


def _check_grad(build, *arrays, tol=1e-4, eps=1e-6):
    """Compare backward() on each input against central differences (f64)."""
    leaves = [nx.tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    nx.backward(out)
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            with nx.no_grad():
                args = [nx.tensor(a) for a in arrays]
                args[i] = nx.tensor(x)
                return build(*args).item()
        point = np.array(arrays[i], dtype=np.float64)
        numeric = nx.finite_diff_gradient(f, point, eps=eps)
        np.testing.assert_allclose(leaf.grad, numeric, rtol=tol, atol=1e-7, err_msg=f"input {i}")


class TestFiniteDifferences:
    """Test cases for the central-difference oracle."""

    def test_quadratic(self):
        """x^2 at 3 has slope 6."""
        grad = nx.finite_diff_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), eps=1e-4)
        assert abs(grad[0] - 6.0) < 1e-6

    def test_only_requested_indices(self):
        """Coordinates not requested stay zero and x is restored."""
        x = np.array([1.0, 2.0, 3.0])
        grad = nx.finite_diff_gradient(lambda v: float(np.sum(v ** 2)), x, indices=[1])
        np.testing.assert_allclose(grad, [0.0, 4.0, 0.0], atol=1e-6)
        np.testing.assert_array_equal(x, [1.0, 2.0, 3.0])

    def test_non_finite_function_names_coordinate(self):
        """A non-finite evaluation raises NumericsError."""
        with pytest.raises(NumericsError, match="non-finite"):
            nx.finite_diff_gradient(lambda v: float("inf") if v[0] < 0 else float(v[0]), np.array([0.0]))

    def test_strided_view_is_perturbed_in_place(self):
        """A non-contiguous view is perturbed where f reads it, then restored."""
        base = np.arange(12.0).reshape(3, 4)
        view = base[:, ::2]
        assert not view.flags.c_contiguous
        grad = nx.finite_diff_gradient(lambda v: float(np.sum(view ** 2)), view, eps=1e-4)
        np.testing.assert_allclose(grad, 2.0 * view, atol=1e-6)
        np.testing.assert_array_equal(base, np.arange(12.0).reshape(3, 4))


class TestOperations:
    """Test cases for forward values and gradients of the operation set."""

    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_softmax_rows_sum_to_one(self):
        """Rows of softmax_rows sum to one, even for large logits."""
        x = self.rng.normal(scale=50.0, size=(7, 11))
        probs = nx.softmax_rows(nx.tensor(x)).value
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_mlp_gradient(self):
        """Two-layer MLP gradients match finite differences."""
        x = self.rng.normal(size=(4, 5))
        w1 = self.rng.normal(size=(5, 6))
        b1 = self.rng.normal(size=(6,))
        w2 = self.rng.normal(size=(6, 3))

        def build(x, w1, b1, w2):
            return nx.sum(nx.gelu(nx.matmul(x, w1) + b1) @ w2 * 0.5)

        _check_grad(build, x, w1, b1, w2)

    def test_elementwise_gradients(self):
        """exp, log, mul and sub."""
        a = self.rng.uniform(0.5, 2.0, size=(3, 4))
        b = self.rng.uniform(0.5, 2.0, size=(4,))
        _check_grad(lambda a, b: nx.sum(nx.log(a * b) - nx.exp(a) / 3.0), a, b)

    def test_layer_norm_gradient(self):
        x = self.rng.normal(size=(3, 8))
        gain = self.rng.normal(size=(8,))
        bias = self.rng.normal(size=(8,))
        weights = self.rng.normal(size=(3, 8))
        _check_grad(lambda x, g, b: nx.sum(nx.layer_norm(x, g, b) * weights), x, gain, bias)

    def test_softmax_rows_gradient(self):
        x = self.rng.normal(size=(2, 5))
        weights = self.rng.normal(size=(2, 5))
        _check_grad(lambda x: nx.sum(nx.softmax_rows(x) * weights), x)

    def test_shape_operations_gradient(self):
        """reshape, concat, take and mean."""
        a = self.rng.normal(size=(2, 6))
        b = self.rng.normal(size=(3, 6))
        weights = self.rng.normal(size=(4, 3, 2))

        def build(a, b):
            joined = nx.concat([a, b], axis=0)
            picked = nx.take(joined, np.array([4, 0, 2, 0]), axis=0)
            return nx.mean(nx.reshape(picked, (4, 3, 2)) * weights)

        _check_grad(build, a, b)

    def test_embedding_lookup_gradient(self):
        """Repeated ids accumulate into the same table row."""
        table = self.rng.normal(size=(5, 3))
        ids = np.array([[0, 2], [2, 4]])
        weights = self.rng.normal(size=(2, 2, 3))
        _check_grad(lambda t: nx.sum(nx.embedding_lookup(t, ids) * weights), table)

    def test_cross_entropy_gradient_and_pad(self):
        """PAD rows give zero loss and zero gradient."""
        logits = self.rng.normal(size=(3, 4, 6))
        targets = self.rng.integers(0, 6, size=(3, 4))
        targets[1, 2] = 6
        node = nx.tensor(logits, requires_grad=True)
        ce = nx.cross_entropy_rows(node, targets, pad_id=6)
        assert ce.value[1, 2] == 0.0
        nx.backward(nx.sum(ce))
        np.testing.assert_array_equal(node.grad[1, 2], np.zeros(6))
        _check_grad(lambda x: nx.sum(nx.cross_entropy_rows(x, targets, pad_id=6)), logits)

    def test_attention_gradient(self):
        """Prefix-visible causal attention with lead dimensions."""
        q = self.rng.normal(size=(2, 5, 8))
        k = self.rng.normal(size=(2, 5, 8))
        v = self.rng.normal(size=(2, 5, 8))
        weights = self.rng.normal(size=(2, 5, 8))
        _check_grad(lambda q, k, v: nx.sum(nx.causal_self_attention(q, k, v, 2, visible_prefix=2) * weights),
                    q, k, v)

    def test_attention_mask(self):
        """Keys before the prefix boundary are always visible, later ones causally."""
        mask = nx.attention_mask(4, 4, visible_prefix=2)
        expected = np.array([
            [1, 1, 0, 0],
            [1, 1, 0, 0],
            [1, 1, 1, 0],
            [1, 1, 1, 1],
        ], dtype=bool)
        np.testing.assert_array_equal(mask, expected)

    def test_attention_offset_matches_full(self):
        """A single query at an offset equals the matching row of the full computation."""
        q = self.rng.normal(size=(6, 8))
        k = self.rng.normal(size=(6, 8))
        v = self.rng.normal(size=(6, 8))
        full = nx.causal_self_attention(q, k, v, 4, visible_prefix=1).value
        last = nx.causal_self_attention(q[4:5], k[:5], v[:5], 4, visible_prefix=1, offset=4).value
        np.testing.assert_allclose(last[0], full[4], atol=1e-12)

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError, match="add"):
            nx.add(nx.tensor(np.zeros((2, 3))), nx.tensor(np.zeros((4,))))


class TestGraph:
    """Test cases for graph recording switches."""

    def test_no_grad_records_nothing(self):
        x = nx.tensor([1.0, 2.0], requires_grad=True)
        with nx.no_grad():
            y = nx.sum(x * x)
        assert not y.requires_grad
        assert nx.grad_enabled()

    def test_stop_gradient_blocks_flow(self):
        """stop_gradient(x) * x differentiates as a constant times x."""
        x = nx.tensor([2.0, -1.0], requires_grad=True)
        nx.backward(nx.sum(nx.stop_gradient(x) * x))
        np.testing.assert_allclose(x.grad, [2.0, -1.0])

    def test_gradients_accumulate(self):
        """Two backward passes add up until zero_grad."""
        x = nx.tensor([3.0], requires_grad=True)
        nx.backward(nx.sum(x * 2.0))
        nx.backward(nx.sum(x * 2.0))
        np.testing.assert_allclose(x.grad, [4.0])
        x.zero_grad()
        assert x.grad is None

    def test_backward_requires_scalar(self):
        x = nx.tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            nx.backward(x * 2.0)

    def test_backward_is_deterministic(self):
        """Two backward passes over identically built graphs give bit-identical gradients."""
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 8))
        table = rng.normal(size=(5, 8))
        ids = np.array([0, 3, 3, 1, 4, 0])
        targets = np.array([1, 4, 2, 5, 0, 3])

        def run():
            leaves = [nx.tensor(a, requires_grad=True) for a in (x, table)]
            h = nx.layer_norm(leaves[0] + nx.embedding_lookup(leaves[1], ids))
            h = nx.causal_self_attention(h, h, h, 2, visible_prefix=2)
            nx.backward(nx.mean(nx.cross_entropy_rows(h, targets)))
            return [leaf.grad for leaf in leaves]

        for first, second in zip(run(), run()):
            np.testing.assert_array_equal(first, second)
