"""
Training objective
Focal loss on classifier logits plus a truncated multi-similarity loss on the
normalized embeddings, each as a fused differentiable operation
"""
import logging
from typing import Optional

import numpy as np
from scipy.special import log_softmax

from crossstate_ecg.core import autodiff as ad
from crossstate_ecg.core.autodiff import Tensor
from crossstate_ecg.core.errors import ShapeMismatch
from crossstate_ecg.models.schemas import LossConfig

logger = logging.getLogger(__name__)


def cosine_sim_matrix(features, eps: float = 1e-8) -> np.ndarray:
    """
    S[i, j] = f_i . f_j / (||f_i|| ||f_j|| + eps)

    Args:
        features: Embeddings [N, D]
        eps: Denominator offset

    Returns:
        Symmetric similarity matrix [N, N]
    """
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1)
    return (f @ f.T) / (np.outer(norms, norms) + eps)


def truncate_sim(s, lambda_thresh: float, tau: float):
    """Clip s - lambda into [-tau, tau]"""
    if tau <= 0:
        raise ValueError(f"tau must be positive (got {tau})")
    return np.clip(np.asarray(s, dtype=np.float64) - lambda_thresh, -tau, tau)


def _masked_logsumexp1p(a: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log(1 + sum_{mask} exp(a)); rows with an empty mask give 0"""
    a = np.where(mask, a, -np.inf)
    m = np.maximum(a.max(axis=1), 0.0)
    with np.errstate(under="ignore"):
        total = np.exp(-m) + np.exp(a - m[:, None]).sum(axis=1)
    return m + np.log(total)


def _pair_masks(labels: np.ndarray):
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(labels.size, dtype=bool)
    return same & off_diag, ~same


def ms_loss(features: Tensor, labels, config: Optional[LossConfig] = None) -> Tensor:
    """
    Truncated multi-similarity loss over all positive and negative pairs

    L = 1/N sum_i [ 1/bp log(1 + sum_P exp(-bp d_ij)) + 1/bn log(1 + sum_N exp(bn d_ik)) ]
    with d = clip(S - lambda, -tau, tau).

    Args:
        features: Embeddings [N, D]
        labels: Class labels [N]
        config: Loss hyper-parameters

    Returns:
        Scalar tensor
    """
    config = config or LossConfig()
    labels = np.asarray(labels)
    f = features.data.astype(np.float64)
    if f.ndim != 2 or labels.shape != (f.shape[0],):
        raise ShapeMismatch(f"ms_loss needs features [N, D] and labels [N] (got {f.shape}, {labels.shape})")
    n = f.shape[0]
    bp, bn = config.beta_p, config.beta_n

    norms = np.linalg.norm(f, axis=1)
    u = f @ f.T
    c = np.outer(norms, norms) + config.eps
    s = u / c
    shifted = s - config.lambda_thresh
    d = np.clip(shifted, -config.tau_clip, config.tau_clip)
    inside = (shifted > -config.tau_clip) & (shifted < config.tau_clip)
    pos, neg = _pair_masks(labels)

    a_pos = -bp * d
    a_neg = bn * d
    lse_pos = _masked_logsumexp1p(a_pos, pos)
    lse_neg = _masked_logsumexp1p(a_neg, neg)
    value = float((lse_pos / bp + lse_neg / bn).sum() / n)

    def backward(g):
        with np.errstate(under="ignore"):
            w_pos = np.where(pos, np.exp(np.where(pos, a_pos, 0.0) - lse_pos[:, None]), 0.0)
            w_neg = np.where(neg, np.exp(np.where(neg, a_neg, 0.0) - lse_neg[:, None]), 0.0)
        g_s = (w_neg - w_pos) * inside / n
        h = g_s + g_s.T
        safe = np.where(norms > 0, norms, 1.0)
        radial = (h * u * norms[None, :] / c ** 2).sum(axis=1) / safe
        grad = (h / c) @ f - f * radial[:, None]
        return (float(g) * grad,)

    return ad.make_op(np.asarray(value, dtype=features.dtype), (features,), backward)


def focal_loss(logits: Tensor, labels, gamma: float = 2.0) -> Tensor:
    """
    Mean focal loss -(1 - p_t)^gamma log p_t from a log-softmax

    gamma = 0 is exactly cross-entropy.

    Args:
        logits: Class scores [N, C], C >= 2
        labels: Integer class indices [N]
        gamma: Focusing exponent

    Returns:
        Scalar tensor
    """
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data.astype(np.float64)
    if z.ndim != 2 or z.shape[1] < 2 or labels.shape != (z.shape[0],):
        raise ShapeMismatch(f"focal_loss needs logits [N, C>=2] and labels [N] (got {z.shape}, {labels.shape})")
    n = z.shape[0]
    rows = np.arange(n)
    log_p = log_softmax(z, axis=1)
    log_pt = log_p[rows, labels]
    pt = np.exp(log_pt)
    one_minus = -np.expm1(log_pt)
    value = float(np.mean(-(one_minus ** gamma) * log_pt))

    def backward(g):
        if gamma == 0:
            slope = -np.ones(n)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                focus = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1) * pt * log_pt, 0.0)
            slope = focus - one_minus ** gamma
        softmax = np.exp(log_p)
        onehot = np.zeros_like(z)
        onehot[rows, labels] = 1.0
        return (float(g) * slope[:, None] * (onehot - softmax) / n,)

    return ad.make_op(np.asarray(value, dtype=logits.dtype), (logits,), backward)


def total_loss(logits: Tensor, features: Tensor, labels, config: Optional[LossConfig] = None) -> Tensor:
    """
    alpha * focal(logits) + (1 - alpha) * ms(features)

    Args:
        logits: Classifier output [N, C]
        features: Embeddings [N, D]
        labels: Integer class indices [N]
        config: Loss hyper-parameters

    Returns:
        Scalar tensor
    """
    config = config or LossConfig()
    labels = np.asarray(labels)
    if logits.shape[0] != features.shape[0] or labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch("logits, features and labels disagree on batch size",
                            {"logits": list(logits.shape), "features": list(features.shape),
                             "labels": int(labels.shape[0])})
    focal = focal_loss(logits, labels, config.focal_gamma)
    ms = ms_loss(features, labels, config)
    return ad.add(ad.scale(focal, config.alpha), ad.scale(ms, 1.0 - config.alpha))
