"""
CrossStateECG Network
Multi-scale convolution, deep convolution, gated self-attention and the
pooling-mapping-normalization embedding head, plus the identity classifier
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from crossstate_ecg.core import autodiff as ad
from crossstate_ecg.core.autodiff import ParamStore, Tensor
from crossstate_ecg.core.errors import ConfigError, MissingFile, ShapeMismatch
from crossstate_ecg.models.schemas import ModelConfig

logger = logging.getLogger(__name__)

MODEL_CONFIG_NAME = "model.json"


class CrossStateNet:
    """
    Embedding network with a linear identity head

    Stages can be switched off through ModelConfig for ablation runs:
    without multi-scale a single K=3 branch produces the fused channels, without
    deep convolution a 1x1 convolution lifts channels, without attention the
    features go straight to pooling.
    """

    def __init__(self, config: ModelConfig, seed: int = 42):
        """
        Initialize CrossStateNet

        Args:
            config: Architecture and ablation flags (n_subjects must be set)
            seed: Weight-initialization seed
        """
        if config.n_subjects is None:
            raise ConfigError("ModelConfig.n_subjects must be set to build the classifier",
                              {"fields": ["model.n_subjects"]})
        self.config = config
        self.store = ParamStore(config.dtype)
        self.training = True
        self._build(np.random.default_rng(seed))
        logger.debug("Built CrossStateNet with %d parameters", self.store.n_parameters())

    # -- construction -----------------------------------------------------

    def _uniform(self, rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def _add_conv(self, rng, prefix: str, c_in: int, c_out: int, k: int, batchnorm: bool = True) -> None:
        self.store.add_param(f"{prefix}.w", self._uniform(rng, (c_out, c_in, k), c_in * k))
        self.store.add_param(f"{prefix}.b", self._uniform(rng, (c_out,), c_in * k))
        if batchnorm:
            self.store.add_param(f"{prefix}.bn.gamma", np.ones(c_out))
            self.store.add_param(f"{prefix}.bn.beta", np.zeros(c_out))
            self.store.add_buffer(f"{prefix}.bn.running_mean", np.zeros(c_out))
            self.store.add_buffer(f"{prefix}.bn.running_var", np.ones(c_out))

    def _add_linear(self, rng, prefix: str, n_in: int, n_out: int) -> None:
        self.store.add_param(f"{prefix}.w", self._uniform(rng, (n_in, n_out), n_in))
        self.store.add_param(f"{prefix}.b", self._uniform(rng, (n_out,), n_in))

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        fused, feat = cfg.fused_channels, cfg.feature_channels
        if cfg.use_multi_scale:
            for k in cfg.branch_kernels:
                self._add_conv(rng, f"ms.k{k}", 1, cfg.branch_channels, k)
        else:
            self._add_conv(rng, "stem.k3", 1, fused, 3)

        if cfg.use_deep_conv:
            self._add_conv(rng, "deep1", fused, fused, 3)
            self._add_conv(rng, "deep2", fused, feat, 3)
        else:
            self._add_conv(rng, "lift", fused, feat, 1, batchnorm=False)

        if cfg.use_attention:
            dk = cfg.attention_channels
            self._add_conv(rng, "attn.q", feat, dk, 1, batchnorm=False)
            self._add_conv(rng, "attn.k", feat, dk, 1, batchnorm=False)
            self._add_conv(rng, "attn.v", feat, feat, 1, batchnorm=False)
            self.store.add_param("attn.gamma", np.zeros(1))

        self._add_linear(rng, "embed", feat, cfg.embedding_dim)
        self._add_linear(rng, "cls", cfg.embedding_dim, cfg.n_subjects)

    # -- modes ------------------------------------------------------------

    def train(self) -> "CrossStateNet":
        self.training = True
        return self

    def eval(self) -> "CrossStateNet":
        self.training = False
        return self

    # -- stages -----------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.store[name]

    def _conv(self, x: Tensor, prefix: str) -> Tensor:
        return ad.conv1d(x, self._p(f"{prefix}.w"), self._p(f"{prefix}.b"))

    def _conv_bn_relu(self, x: Tensor, prefix: str) -> Tensor:
        y = self._conv(x, prefix)
        y = ad.batchnorm1d(
            y,
            self._p(f"{prefix}.bn.gamma"),
            self._p(f"{prefix}.bn.beta"),
            self._p(f"{prefix}.bn.running_mean"),
            self._p(f"{prefix}.bn.running_var"),
            training=self.training,
        )
        return ad.relu(y)

    def _as_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.store.dtype))

    def multi_scale_block(self, x: Tensor) -> Tensor:
        """
        Parallel K=3/5/7/11 branches, each conv + BN + ReLU, concatenated on channels

        Args:
            x: Single-channel input [B, 1, L]

        Returns:
            Fused features [B, branch_channels * n_branches, L]
        """
        x = self._as_tensor(x)
        if x.data.ndim != 3 or x.shape[1] != 1:
            raise ShapeMismatch(f"Network input must be [B, 1, L] (got {x.shape})", {"shape": list(x.shape)})
        if not self.config.use_multi_scale:
            return self._conv_bn_relu(x, "stem.k3")
        branches = [self._conv_bn_relu(x, f"ms.k{k}") for k in self.config.branch_kernels]
        return ad.concat(branches, axis=1)

    def deep_conv(self, x: Tensor) -> Tensor:
        """Two K=3 conv + BN + ReLU blocks widening to the feature channels"""
        x = self._as_tensor(x)
        if x.data.ndim != 3 or x.shape[1] != self.config.fused_channels:
            raise ShapeMismatch(f"deep_conv expects {self.config.fused_channels} channels (got {x.shape})")
        if not self.config.use_deep_conv:
            return self._conv(x, "lift")
        return self._conv_bn_relu(self._conv_bn_relu(x, "deep1"), "deep2")

    def attention_weights(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Value projection [B, C, L] and attention matrix [B, L, L] whose rows sum to 1"""
        q = self._conv(x, "attn.q")
        k = self._conv(x, "attn.k")
        v = self._conv(x, "attn.v")
        scores = ad.matmul_batched(ad.transpose_last2(q), k)
        scores = ad.scale(scores, 1.0 / np.sqrt(self.config.attention_channels))
        return v, ad.softmax_lastdim(scores)

    def self_attention(self, x: Tensor) -> Tensor:
        """
        Gated residual self-attention: gamma * (V A^T) + x

        Args:
            x: Features [B, C, L]

        Returns:
            Features of the same shape
        """
        x = self._as_tensor(x)
        if x.data.ndim != 3 or x.shape[1] != self.config.feature_channels:
            raise ShapeMismatch(f"self_attention expects {self.config.feature_channels} channels (got {x.shape})")
        if not self.config.use_attention:
            return x
        v, attn = self.attention_weights(x)
        attended = ad.matmul_batched(v, ad.transpose_last2(attn))
        return ad.add(ad.mul_scalar(self._p("attn.gamma"), attended), x)

    def embed(self, x) -> Tensor:
        """
        Unit-norm embeddings for a same-length batch

        Args:
            x: Input [B, 1, L]

        Returns:
            Embeddings [B, embedding_dim]
        """
        h = self.self_attention(self.deep_conv(self.multi_scale_block(x)))
        pooled = ad.global_avg_pool(h)
        mapped = ad.linear(pooled, self._p("embed.w"), self._p("embed.b"))
        return ad.l2_normalize(mapped)

    def classify(self, e: Tensor) -> Tensor:
        """Identity logits [B, n_subjects]"""
        e = self._as_tensor(e)
        if e.data.ndim != 2 or e.shape[1] != self.config.embedding_dim:
            raise ShapeMismatch(f"classify expects [B, {self.config.embedding_dim}] (got {e.shape})")
        return ad.linear(e, self._p("cls.w"), self._p("cls.b"))

    def forward(self, x) -> Tuple[Tensor, Tensor]:
        """Embeddings and logits for a same-length batch"""
        e = self.embed(x)
        return e, self.classify(e)

    def forward_segments(self, samples: Sequence[np.ndarray]) -> Tuple[Tensor, Tensor, np.ndarray]:
        """
        Forward a possibly mixed-length batch

        Samples are grouped by length, each group runs as one batch and the
        group outputs are concatenated.

        Args:
            samples: 1-D signals

        Returns:
            Tuple of (embeddings, logits, order) where row i belongs to samples[order[i]]
        """
        groups: Dict[int, List[int]] = {}
        for i, s in enumerate(samples):
            groups.setdefault(len(s), []).append(i)
        embeddings, logits, order = [], [], []
        for length in sorted(groups):
            idx = groups[length]
            batch = np.stack([samples[i] for i in idx])[:, None, :]
            e, z = self.forward(batch)
            embeddings.append(e)
            logits.append(z)
            order.extend(idx)
        if len(embeddings) == 1:
            return embeddings[0], logits[0], np.asarray(order)
        return ad.concat(embeddings, axis=0), ad.concat(logits, axis=0), np.asarray(order)

    def infer(self, samples: Sequence[np.ndarray], batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
        """
        Eval-mode embeddings and logits in input order, without recording a tape

        Args:
            samples: 1-D signals
            batch_size: Segments per forward pass

        Returns:
            Tuple of (embeddings [N, D], logits [N, n_subjects])
        """
        was_training = self.training
        self.eval()
        n = len(samples)
        emb = np.zeros((n, self.config.embedding_dim))
        logits = np.zeros((n, self.config.n_subjects))
        try:
            for start in range(0, n, batch_size):
                chunk = list(samples[start:start + batch_size])
                e, z, order = self.forward_segments(chunk)
                emb[start + order] = e.data
                logits[start + order] = z.data
        finally:
            self.training = was_training
        return emb, logits

    # -- persistence ------------------------------------------------------

    def save(self, out_dir, metadata: Optional[dict] = None) -> Path:
        """Write model.json and the checkpoint pair"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / MODEL_CONFIG_NAME).write_text(self.config.model_dump_json(indent=2))
        return ad.save_checkpoint(self.store, out_dir, metadata)

    @classmethod
    def load(cls, model_dir) -> Tuple["CrossStateNet", dict]:
        """
        Rebuild a network from model.json and its checkpoint

        Returns:
            Tuple of (network in eval mode, checkpoint metadata)
        """
        model_dir = Path(model_dir)
        config_path = model_dir / MODEL_CONFIG_NAME
        if not config_path.exists():
            raise MissingFile(f"Model config not found: {config_path}", {"path": str(config_path)})
        config = ModelConfig.model_validate(json.loads(config_path.read_text()))
        net = cls(config)
        metadata = ad.load_checkpoint(net.store, model_dir)
        return net.eval(), metadata
