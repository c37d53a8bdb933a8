"""
Tests for the focal and multi-similarity objectives
Run with: pytest crossstate_ecg/tests/test_losses.py
"""
import numpy as np
import pytest

from crossstate_ecg.core.autodiff import Tensor, grad_check
from crossstate_ecg.core.errors import ShapeMismatch
from crossstate_ecg.core.losses import cosine_sim_matrix, focal_loss, ms_loss, total_loss, truncate_sim
from crossstate_ecg.models.schemas import LossConfig


def _naive_ms(f, labels, config: LossConfig) -> float:
    n = len(labels)
    total = 0.0
    for i in range(n):
        pos, neg = 0.0, 0.0
        for j in range(n):
            s = f[i] @ f[j] / (np.linalg.norm(f[i]) * np.linalg.norm(f[j]) + config.eps)
            d = min(max(s - config.lambda_thresh, -config.tau_clip), config.tau_clip)
            if j != i and labels[j] == labels[i]:
                pos += np.exp(-config.beta_p * d)
            elif labels[j] != labels[i]:
                neg += np.exp(config.beta_n * d)
        total += np.log1p(pos) / config.beta_p + np.log1p(neg) / config.beta_n
    return total / n


class TestSimilarity:
    """Tests for cosine similarity and truncation"""

    def test_identical_unit_vectors(self):
        """Test the eps offset in the denominator"""
        s = cosine_sim_matrix(np.array([[1.0, 0.0], [1.0, 0.0]]))

        assert s[0, 1] == pytest.approx(1.0 / (1.0 + 1e-8), abs=1e-15)

    def test_orthogonal_vectors(self):
        """Test orthogonal rows have zero similarity"""
        s = cosine_sim_matrix(np.array([[1.0, 0.0], [0.0, 3.0]]))

        assert abs(s[0, 1]) < 1e-12

    def test_matches_pairwise_loop(self):
        """Test the matrix form against a per-pair loop"""
        f = np.random.default_rng(0).normal(size=(5, 4))
        s = cosine_sim_matrix(f)
        for i in range(5):
            for j in range(5):
                expected = f[i] @ f[j] / (np.linalg.norm(f[i]) * np.linalg.norm(f[j]) + 1e-8)
                assert s[i, j] == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("s,expected", [(0.9, 0.4), (2.0, 1.0), (-0.8, -1.0)])
    def test_truncation(self, s, expected):
        """Test shift by lambda and clamp to [-tau, tau]"""
        assert truncate_sim(s, 0.5, 1.0) == pytest.approx(expected)

    def test_truncation_needs_positive_tau(self):
        """Test tau must be positive"""
        with pytest.raises(ValueError):
            truncate_sim(0.3, 0.5, 0.0)


class TestMultiSimilarity:
    """Tests for the truncated multi-similarity loss"""

    def test_single_positive_pair_at_margin(self):
        """Test one positive pair with s = lambda gives ln(2) / 2"""
        angle = np.pi / 3
        f = Tensor(np.array([[1.0, 0.0], [np.cos(angle), np.sin(angle)]]))
        loss = ms_loss(f, [0, 0], LossConfig())

        assert loss.item() == pytest.approx(0.5 * np.log(2.0), abs=1e-6)

    def test_saturated_negatives_vanish(self):
        """Test negatives clamped at -tau contribute almost nothing"""
        f = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]))
        # every cross-class pair has s = -1 and d = -1; same-class pairs sit at s = 1
        loss = ms_loss(f, [0, 1, 0, 1], LossConfig())
        pos_term = np.log1p(np.exp(-2.0 * (1.0 / (1.0 + 1e-8) - 0.5))) / 2.0
        neg_term = np.log1p(2 * np.exp(-50.0)) / 50.0

        assert loss.item() == pytest.approx(pos_term + neg_term, rel=1e-9)
        assert neg_term < 1e-20

    def test_matches_naive_loop(self):
        """Test a random batch against a double loop"""
        rng = np.random.default_rng(1)
        f = rng.normal(size=(8, 5))
        labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        config = LossConfig(beta_n=10.0)

        assert ms_loss(Tensor(f), labels, config).item() == pytest.approx(_naive_ms(f, labels, config), abs=1e-10)

    def test_gradient(self):
        """Test the fused backward rule against finite differences"""
        rng = np.random.default_rng(2)
        f = Tensor(rng.normal(size=(6, 4)), requires_grad=True, name="f")
        labels = [0, 0, 0, 1, 1, 2]
        result = grad_check(lambda: ms_loss(f, labels, LossConfig(beta_n=10.0, lambda_thresh=0.1)), [f])

        assert result.passed, result

    def test_all_distinct_labels(self):
        """Test a batch with no positive pairs has no positive term"""
        f = Tensor(np.eye(3))
        loss = ms_loss(f, [0, 1, 2], LossConfig())
        # s = 0 for every pair, so d = -0.5
        expected = np.log1p(2 * np.exp(50.0 * -0.5)) / 50.0

        assert loss.item() == pytest.approx(expected, rel=1e-9)

    @pytest.mark.parametrize("n", range(1, 9))
    def test_matches_naive_loop_across_seeds(self, n):
        """Test a hundred random batches of each size against the double loop"""
        config = LossConfig()
        for seed in range(100):
            rng = np.random.default_rng([n, seed])
            f = rng.normal(size=(n, 4))
            labels = rng.integers(0, max(1, n // 2) + 1, size=n)

            assert ms_loss(Tensor(f), labels, config).item() == pytest.approx(
                _naive_ms(f, labels, config), rel=1e-9, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_permutation_invariant(self, seed):
        """Test reordering the batch leaves the loss unchanged"""
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(8, 5))
        labels = rng.integers(0, 3, size=8)
        order = rng.permutation(8)
        config = LossConfig(beta_n=10.0)

        assert ms_loss(Tensor(f[order]), labels[order], config).item() == pytest.approx(
            ms_loss(Tensor(f), labels, config).item(), rel=1e-12)

    @pytest.mark.parametrize("same_class", [True, False])
    def test_monotone_in_pair_similarity(self, same_class):
        """Test the loss falls as positives converge and rises as negatives converge"""
        angles = np.linspace(0.0, 2.0, 21)
        labels = [0, 0] if same_class else [0, 1]
        losses = np.array([
            ms_loss(Tensor(np.array([[1.0, 0.0], [np.cos(a), np.sin(a)]])), labels, LossConfig()).item()
            for a in angles
        ])
        steps = np.diff(losses)

        if same_class:
            assert np.all(steps > 0)
        else:
            assert np.all(steps < 0)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_across_seeds(self, seed):
        """Test the fused backward rule on random batches"""
        rng = np.random.default_rng(seed)
        f = Tensor(rng.normal(size=(6, 4)), requires_grad=True, name="f")
        labels = rng.integers(0, 3, size=6)
        result = grad_check(lambda: ms_loss(f, labels, LossConfig(beta_n=10.0)), [f])

        assert result.passed, result

    def test_label_shape_mismatch(self):
        """Test labels must match the batch"""
        with pytest.raises(ShapeMismatch):
            ms_loss(Tensor(np.ones((3, 2))), [0, 1])


class TestFocal:
    """Tests for the focal loss"""

    def test_half_probability(self):
        """Test p_t = 0.5 with gamma = 2 gives 0.25 ln 2"""
        loss = focal_loss(Tensor(np.zeros((1, 2))), [0], gamma=2.0)

        assert loss.item() == pytest.approx(0.25 * np.log(2.0), abs=1e-10)

    def test_confident_prediction(self):
        """Test a confidently correct prediction costs nothing"""
        loss = focal_loss(Tensor(np.array([[50.0, -50.0]])), [0], gamma=2.0)

        assert loss.item() < 1e-30

    def test_gamma_zero_is_cross_entropy(self):
        """Test gamma = 0 reduces to cross-entropy"""
        rng = np.random.default_rng(3)
        z = rng.normal(size=(6, 4))
        labels = np.array([0, 3, 1, 1, 2, 0])
        shifted = z - z.max(axis=1, keepdims=True)
        ce = -np.mean(shifted[np.arange(6), labels] - np.log(np.exp(shifted).sum(axis=1)))

        assert focal_loss(Tensor(z), labels, gamma=0.0).item() == pytest.approx(ce, abs=1e-10)

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0])
    def test_gradient(self, gamma):
        """Test the backward rule for several focusing exponents"""
        z = Tensor(np.random.default_rng(4).normal(size=(5, 3)), requires_grad=True, name="z")
        labels = [0, 1, 2, 2, 0]
        result = grad_check(lambda: focal_loss(z, labels, gamma), [z])

        assert result.passed, result

    def test_needs_two_classes(self):
        """Test a single-column logit matrix is rejected"""
        with pytest.raises(ShapeMismatch):
            focal_loss(Tensor(np.zeros((3, 1))), [0, 0, 0])


class TestTotalLoss:
    """Tests for the weighted combination"""

    def _batch(self, requires_grad=False):
        rng = np.random.default_rng(5)
        logits = Tensor(rng.normal(size=(6, 3)), requires_grad=requires_grad, name="logits")
        features = Tensor(rng.normal(size=(6, 4)), requires_grad=requires_grad, name="features")
        return logits, features, np.array([0, 0, 1, 1, 2, 2])

    @pytest.mark.parametrize("alpha", [0.0, 0.05, 1.0])
    def test_weighting(self, alpha):
        """Test alpha mixes focal and multi-similarity terms"""
        logits, features, labels = self._batch()
        config = LossConfig(alpha=alpha)
        focal = focal_loss(logits, labels, config.focal_gamma).item()
        ms = ms_loss(features, labels, config).item()

        assert total_loss(logits, features, labels, config).item() == pytest.approx(
            alpha * focal + (1 - alpha) * ms, rel=1e-12)

    def test_gradient(self):
        """Test gradients reach both logits and features"""
        logits, features, labels = self._batch(requires_grad=True)
        config = LossConfig(alpha=0.3, beta_n=10.0)
        result = grad_check(lambda: total_loss(logits, features, labels, config), [logits, features])

        assert result.passed, result
        assert np.any(logits.grad != 0) and np.any(features.grad != 0)

    def test_batch_size_mismatch(self):
        """Test logits and features must agree on batch size"""
        logits, features, labels = self._batch()
        with pytest.raises(ShapeMismatch):
            total_loss(logits, Tensor(features.data[:4]), labels)
