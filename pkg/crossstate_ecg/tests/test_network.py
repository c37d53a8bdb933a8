"""
Tests for the embedding network
Run with: pytest crossstate_ecg/tests/test_network.py
"""
import numpy as np
import pytest

from crossstate_ecg.core import autodiff as ad
from crossstate_ecg.core.autodiff import Tensor, grad_check
from crossstate_ecg.core.errors import ConfigError, MissingFile, ShapeMismatch
from crossstate_ecg.core.network import CrossStateNet
from crossstate_ecg.models.schemas import ABLATIONS, ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        branch_kernels=[3, 5],
        branch_channels=4,
        deep_channels=[8, 16],
        attention_reduction=4,
        embedding_dim=8,
        n_subjects=3,
        dtype="float64",
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def batch():
    return np.random.default_rng(0).normal(size=(2, 1, 24))


class TestConstruction:
    """Tests for parameter layout"""

    def test_requires_subject_count(self):
        """Test the classifier width must be known"""
        with pytest.raises(ConfigError):
            CrossStateNet(tiny_config(n_subjects=None))

    def test_parameter_names(self):
        """Test the full model holds every stage"""
        store = CrossStateNet(tiny_config()).store

        for name in ("ms.k3.w", "ms.k5.bn.gamma", "deep1.w", "deep2.bn.running_var",
                     "attn.q.w", "attn.v.b", "attn.gamma", "embed.w", "cls.w"):
            assert name in store
        assert store["attn.gamma"].data[0] == 0.0
        assert store["cls.w"].shape == (8, 3)

    def test_seeded_initialization(self):
        """Test identical seeds give identical weights"""
        a, b = CrossStateNet(tiny_config(), seed=5), CrossStateNet(tiny_config(), seed=5)

        for name, t in a.store:
            assert np.array_equal(t.data, b.store[name].data)

    def test_invalid_config(self):
        """Test deep_channels[0] must match the fused width"""
        with pytest.raises(ValueError):
            tiny_config(deep_channels=[12, 16])


class TestForward:
    """Tests for stage outputs"""

    def test_output_shapes(self, batch):
        """Test embedding and logit shapes with unit-norm embeddings"""
        net = CrossStateNet(tiny_config())
        e, logits = net.forward(batch)

        assert e.shape == (2, 8)
        assert logits.shape == (2, 3)
        assert np.allclose(np.linalg.norm(e.data, axis=1), 1.0)

    def test_multi_scale_concatenates_branches(self, batch):
        """Test fused width is branch_channels * n_branches"""
        out = CrossStateNet(tiny_config()).multi_scale_block(batch)

        assert out.shape == (2, 8, 24)

    def test_rejects_multichannel_input(self):
        """Test the network input must have one channel"""
        with pytest.raises(ShapeMismatch):
            CrossStateNet(tiny_config()).multi_scale_block(np.zeros((2, 2, 24)))

    def test_attention_is_identity_at_zero_gate(self, batch):
        """Test gamma = 0 leaves features unchanged"""
        net = CrossStateNet(tiny_config())
        x = Tensor(np.random.default_rng(1).normal(size=(2, 16, 24)))

        assert np.allclose(net.self_attention(x).data, x.data)

    def test_attention_rows_sum_to_one(self):
        """Test the attention matrix is row-stochastic"""
        net = CrossStateNet(tiny_config())
        x = Tensor(np.random.default_rng(2).normal(size=(2, 16, 24)))
        v, attn = net.attention_weights(x)

        assert attn.shape == (2, 24, 24)
        assert v.shape == (2, 16, 24)
        assert np.allclose(attn.data.sum(axis=-1), 1.0)

    def test_attention_gate_changes_output(self, batch):
        """Test a non-zero gate mixes attended features in"""
        net = CrossStateNet(tiny_config())
        x = Tensor(np.random.default_rng(3).normal(size=(2, 16, 24)))
        net.store["attn.gamma"].data[...] = 0.5

        assert not np.allclose(net.self_attention(x).data, x.data)

    @pytest.mark.parametrize("name", sorted(ABLATIONS))
    def test_ablations_build_and_run(self, name, batch):
        """Test every ablation variant produces valid embeddings"""
        net = CrossStateNet(tiny_config().with_ablation(name))
        e, logits = net.forward(batch)
        flags = ABLATIONS[name]

        assert e.shape == (2, 8) and logits.shape == (2, 3)
        assert ("ms.k3.w" in net.store) == flags["use_multi_scale"]
        assert ("stem.k3.w" in net.store) != flags["use_multi_scale"]
        assert ("deep1.w" in net.store) == flags["use_deep_conv"]
        assert ("lift.w" in net.store) != flags["use_deep_conv"]
        assert ("attn.gamma" in net.store) == flags["use_attention"]

    def test_unknown_ablation(self):
        """Test ablation names are validated"""
        with pytest.raises(ValueError):
            tiny_config().with_ablation("A9")


class TestInference:
    """Tests for batched inference"""

    def test_mixed_lengths_keep_input_order(self):
        """Test 6 s and 4 s style windows in one call come back in input order"""
        net = CrossStateNet(tiny_config())
        rng = np.random.default_rng(4)
        samples = [rng.normal(size=30), rng.normal(size=20), rng.normal(size=30)]
        emb, logits = net.infer(samples)

        for i, s in enumerate(samples):
            single, single_logits = net.infer([s])
            assert np.allclose(emb[i], single[0])
            assert np.allclose(logits[i], single_logits[0])

    def test_infer_restores_mode(self):
        """Test inference does not leave a training network in eval mode"""
        net = CrossStateNet(tiny_config()).train()
        net.infer([np.zeros(24) + np.arange(24)])

        assert net.training

    def test_infer_does_not_touch_running_stats(self):
        """Test eval-mode batch normalization keeps its buffers"""
        net = CrossStateNet(tiny_config())
        before = net.store["deep1.bn.running_mean"].data.copy()
        net.infer([np.random.default_rng(5).normal(size=24) for _ in range(3)], batch_size=2)

        assert np.array_equal(before, net.store["deep1.bn.running_mean"].data)

    def test_save_and_load(self, tmp_path, batch):
        """Test a reloaded network gives the same embeddings"""
        net = CrossStateNet(tiny_config(), seed=9)
        net.forward(batch)  # move running stats away from their defaults
        net.save(tmp_path, metadata={"classes": ["a", "b", "c"]})
        loaded, metadata = CrossStateNet.load(tmp_path)
        samples = list(batch[:, 0, :])

        assert metadata["classes"] == ["a", "b", "c"]
        assert not loaded.training
        assert np.allclose(loaded.infer(samples)[0], net.infer(samples)[0])

    def test_load_missing(self, tmp_path):
        """Test loading from an empty directory"""
        with pytest.raises(MissingFile):
            CrossStateNet.load(tmp_path)


class TestEndToEndGradient:
    """Finite-difference check through the whole network"""

    @pytest.mark.parametrize("ablation", [None, "A2", "A3"])
    def test_network_gradients(self, ablation, batch):
        """Test analytic gradients of sampled parameters in every stage"""
        config = tiny_config()
        if ablation:
            config = config.with_ablation(ablation)
        net = CrossStateNet(config, seed=1).train()
        if "attn.gamma" in net.store:
            net.store["attn.gamma"].data[...] = 0.7
        weights = Tensor(np.random.default_rng(6).normal(size=(2, 3)))

        def loss():
            _, logits = net.forward(batch)
            return ad.sum_all(ad.mul(logits, weights))

        names = [n for n in ("ms.k3.w", "stem.k3.w", "deep1.bn.gamma", "lift.w", "deep2.w",
                             "attn.q.w", "attn.gamma", "embed.w", "cls.b") if n in net.store]
        result = grad_check(loss, [net.store[n] for n in names], h=1e-7, max_entries=6)

        assert result.passed, result
        assert set(result.errors) == set(names)
