"""
Biometric error rates
FAR/FRR at a threshold, ROC sweep with AUC, equal error rate
"""
from typing import Sequence, Tuple

import numpy as np
from sklearn.metrics import auc, roc_curve

from crossstate_ecg.core.errors import EmptyScores
from crossstate_ecg.models.schemas import RocCurve


def _as_scores(genuine: Sequence[float], impostor: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    genuine = np.asarray(genuine, dtype=np.float64).ravel()
    impostor = np.asarray(impostor, dtype=np.float64).ravel()
    if genuine.size == 0 or impostor.size == 0:
        raise EmptyScores("Genuine and impostor score lists must both be non-empty",
                          {"n_genuine": int(genuine.size), "n_impostor": int(impostor.size)})
    return genuine, impostor


def far_frr(genuine: Sequence[float], impostor: Sequence[float], threshold: float) -> Tuple[float, float]:
    """
    Error rates with the accept rule score >= threshold

    Args:
        genuine: Same-identity scores
        impostor: Cross-identity scores
        threshold: Decision threshold

    Returns:
        Tuple of (FAR, FRR) as fractions
    """
    genuine, impostor = _as_scores(genuine, impostor)
    return float(np.mean(impostor >= threshold)), float(np.mean(genuine < threshold))


def roc_auc(genuine: Sequence[float], impostor: Sequence[float]) -> Tuple[RocCurve, float]:
    """
    ROC over every distinct score threshold and its trapezoidal area

    Args:
        genuine: Same-identity scores
        impostor: Cross-identity scores

    Returns:
        Tuple of (RocCurve, AUC)
    """
    genuine, impostor = _as_scores(genuine, impostor)
    y_true = np.concatenate([np.ones(genuine.size), np.zeros(impostor.size)])
    scores = np.concatenate([genuine, impostor])
    fpr, tpr, thresholds = roc_curve(y_true, scores, drop_intermediate=False)
    # first threshold is a sentinel above every score
    thresholds = thresholds.astype(np.float64)
    thresholds[0] = scores.max() + 1.0
    curve = RocCurve(thresholds=thresholds.tolist(), far=fpr.tolist(), tpr=tpr.tolist())
    return curve, float(auc(fpr, tpr))


def eer(genuine: Sequence[float], impostor: Sequence[float]) -> Tuple[float, float]:
    """
    Equal error rate over all distinct score thresholds

    The threshold minimizing |FAR - FRR| is chosen (lowest on ties) and the
    EER is the mean of the two rates there.

    Args:
        genuine: Same-identity scores
        impostor: Cross-identity scores

    Returns:
        Tuple of (EER, threshold)
    """
    genuine, impostor = _as_scores(genuine, impostor)
    g_sorted, i_sorted = np.sort(genuine), np.sort(impostor)
    pooled = np.concatenate([genuine, impostor])
    candidates = np.append(np.unique(pooled), np.nextafter(pooled.max(), np.inf))
    n_g, n_i = g_sorted.size, i_sorted.size
    rejected = np.searchsorted(g_sorted, candidates, side="left")
    accepted = n_i - np.searchsorted(i_sorted, candidates, side="left")
    # compare |FAR - FRR| on integer cross-multiplied counts so ties are exact
    best = int(np.argmin(np.abs(accepted * n_g - rejected * n_i)))
    far, frr = accepted[best] / n_i, rejected[best] / n_g
    return float((far + frr) / 2.0), float(candidates[best])
