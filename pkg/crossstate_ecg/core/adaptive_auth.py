"""
Adaptive Authentication
Template enrollment, 1:1 verification, 1:N identification and per-user
thresholds built from global, personal and local score statistics
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from crossstate_ecg.core.errors import (
    DegenerateSeparation,
    DegenerateSpread,
    InsufficientData,
    IoFailure,
    MalformedHeader,
    MissingFile,
    NoTemplates,
    TooFewScores,
    ZeroMean,
)
from crossstate_ecg.core.losses import cosine_sim_matrix
from crossstate_ecg.core.metrics import eer
from crossstate_ecg.models.schemas import (
    Decision,
    Gallery,
    GalleryEntry,
    IdentificationResult,
    Template,
    ThresholdProfile,
    ThresholdWeights,
    VerificationResult,
)

logger = logging.getLogger(__name__)

SEPARATION_TOL = 1e-9
TEMPLATE_TOL = 1e-9
TAU_FLOOR, TAU_CEIL = 0.01, 0.99
LOCAL_KNOTS = (0.25, 0.50, 0.75)
LOCAL_VALUES = (0.2, 0.4, 0.6)


@dataclass
class ScoreSet:
    """Genuine and impostor similarity scores"""
    genuine: np.ndarray
    impostor: np.ndarray
    per_user_genuine: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def mu_g(self) -> float:
        return float(np.mean(self.genuine))

    @property
    def mu_i(self) -> float:
        return float(np.mean(self.impostor))

    @property
    def sigma_g(self) -> float:
        return float(np.std(self.genuine))

    def mu_p(self, user: str) -> float:
        """Mean genuine score of one user, falling back to the global mean"""
        scores = self.per_user_genuine.get(user)
        if scores is None or scores.size == 0:
            return self.mu_g
        return float(np.mean(scores))

    @property
    def pooled(self) -> np.ndarray:
        return np.concatenate([self.genuine, self.impostor])


def build_scores(embeddings, labels: Sequence[str]) -> ScoreSet:
    """
    All pairwise cosine scores (i < j) split by identity

    Args:
        embeddings: Embeddings [N, D]
        labels: Identity per row

    Returns:
        ScoreSet
    """
    labels = np.asarray(labels)
    users, counts = np.unique(labels, return_counts=True)
    if users.size < 2 or counts.max() < 2:
        raise InsufficientData("Scores need at least 2 users and one user with 2 samples",
                               {"users": int(users.size), "max_samples": int(counts.max()) if counts.size else 0})
    sim = cosine_sim_matrix(embeddings)
    iu, ju = np.triu_indices(labels.size, k=1)
    pair_scores = sim[iu, ju]
    same = labels[iu] == labels[ju]
    per_user = {str(u): pair_scores[same & (labels[iu] == u)] for u in users}
    return ScoreSet(genuine=pair_scores[same], impostor=pair_scores[~same], per_user_genuine=per_user)


def global_factor(tau_b: float, mu_g: float, mu_i: float) -> float:
    """F_g = (tau_b - mu_i) / (mu_g - mu_i)"""
    if abs(mu_g - mu_i) <= SEPARATION_TOL:
        raise DegenerateSeparation("Genuine and impostor means coincide", {"mu_g": mu_g, "mu_i": mu_i})
    return (tau_b - mu_i) / (mu_g - mu_i)


def personal_factor(mu_p: float, mu_g: float, sigma_g: float) -> float:
    """F_p = (mu_p - mu_g) / sigma_g"""
    if sigma_g <= SEPARATION_TOL:
        raise DegenerateSpread("Genuine scores have no spread", {"sigma_g": sigma_g})
    return (mu_p - mu_g) / sigma_g


def lower_quantiles(scores: Sequence[float], probs: Sequence[float] = LOCAL_KNOTS) -> np.ndarray:
    """Smallest score x with empirical F(x) >= p, for each p"""
    return np.quantile(np.asarray(scores, dtype=np.float64), probs, method="inverted_cdf")


def local_factor(tau_b: float, scores: Sequence[float]) -> float:
    """
    Piecewise-linear position of tau_b among the score quartiles

    Quartiles map to 0.2 / 0.4 / 0.6; values outside the quartile range are
    clamped, and coinciding quartiles collapse to a step.

    Args:
        tau_b: Baseline threshold
        scores: Pooled genuine and impostor scores

    Returns:
        F_l in [0.2, 0.6]
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 4:
        raise TooFewScores(f"Local factor needs at least 4 scores (got {scores.size})")
    q = lower_quantiles(scores)
    if tau_b < q[0]:
        return LOCAL_VALUES[0]
    if tau_b >= q[-1]:
        return LOCAL_VALUES[-1]
    i = int(np.flatnonzero(q <= tau_b).max())
    x0, x1 = q[i], q[i + 1]
    y0, y1 = LOCAL_VALUES[i], LOCAL_VALUES[i + 1]
    return float(y0 + (y1 - y0) * (tau_b - x0) / (x1 - x0))


class AdaptiveThreshold(NamedTuple):
    tau_p: float
    raw: float
    clamped: bool


def adaptive_threshold(tau_b: float, f_g: float, f_p: float, f_l: float,
                       weights: Optional[ThresholdWeights] = None) -> AdaptiveThreshold:
    """
    tau_p = tau_b * (w_g (1 + F_g) + w_p (1 + F_p) + w_l F_l), clamped to [0.01, 0.99]

    Returns:
        AdaptiveThreshold with the clamped value, the raw value and a clamp flag
    """
    w = weights or ThresholdWeights()
    raw = tau_b * (w.w_g * (1.0 + f_g) + w.w_p * (1.0 + f_p) + w.w_l * f_l)
    tau_p = min(max(raw, TAU_FLOOR), TAU_CEIL)
    return AdaptiveThreshold(tau_p=float(tau_p), raw=float(raw), clamped=tau_p != raw)


def build_profile(user: str, tau_b: float, scores: ScoreSet,
                  weights: Optional[ThresholdWeights] = None) -> ThresholdProfile:
    """Compute the three factors for one user and combine them"""
    weights = weights or ThresholdWeights()
    f_g = global_factor(tau_b, scores.mu_g, scores.mu_i)
    f_p = personal_factor(scores.mu_p(user), scores.mu_g, scores.sigma_g)
    f_l = local_factor(tau_b, scores.pooled)
    t = adaptive_threshold(tau_b, f_g, f_p, f_l, weights)
    if t.clamped:
        logger.warning("Threshold for %s clamped from %.4f to %.4f", user, t.raw, t.tau_p)
    return ThresholdProfile(user=user, tau_b=tau_b, f_g=f_g, f_p=f_p, f_l=f_l, weights=weights,
                            raw_tau_p=t.raw, tau_p=t.tau_p, clamped=t.clamped)


def enroll(user: str, embeddings) -> Template:
    """
    Template = normalized mean embedding

    Args:
        user: Identity
        embeddings: Enrollment embeddings [n, D]

    Returns:
        Template
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if e.shape[0] == 0:
        raise InsufficientData(f"No enrollment embeddings for {user}")
    mean = e.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < TEMPLATE_TOL:
        raise ZeroMean(f"Mean embedding of {user} has near-zero norm", {"norm": float(norm)})
    return Template(user=user, vector=(mean / norm).tolist())


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 0.0


def verify(probe, template: Template, profile: ThresholdProfile) -> VerificationResult:
    """Accept when cosine(probe, template) >= tau_p"""
    score = cosine(probe, template.vector)
    decision = Decision.ACCEPT if score >= profile.tau_p else Decision.REJECT
    return VerificationResult(user=template.user, decision=decision, score=score, threshold=profile.tau_p)


def identify(probe, templates) -> IdentificationResult:
    """
    Nearest template by cosine; ties go to the lexicographically smaller user

    Args:
        probe: Probe embedding
        templates: Mapping user -> Template, or a sequence of Templates

    Returns:
        IdentificationResult
    """
    if isinstance(templates, Mapping):
        templates = list(templates.values())
    if not templates:
        raise NoTemplates("Gallery holds no templates")
    ordered = sorted(templates, key=lambda t: t.user)
    matrix = np.asarray([t.vector for t in ordered], dtype=np.float64)
    probe = np.asarray(probe, dtype=np.float64)
    scores = matrix @ probe / max(np.linalg.norm(probe), 1e-300)
    best = int(np.argmax(scores))
    return IdentificationResult(user=ordered[best].user, score=float(scores[best]))


def probe_scores(templates: Mapping[str, Template], embeddings, labels: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Probe-vs-template scores split into genuine and impostor

    Args:
        templates: Enrolled templates by user
        embeddings: Probe embeddings [N, D]
        labels: True identity per probe

    Returns:
        Tuple of (genuine, impostor) score arrays
    """
    users = sorted(templates)
    matrix = np.asarray([templates[u].vector for u in users], dtype=np.float64)
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-300)
    sims = e @ matrix.T
    own = np.asarray(labels)[:, None] == np.asarray(users)[None, :]
    return sims[own], sims[~own]


def baseline_threshold(templates: Mapping[str, Template], embeddings, labels: Sequence[str],
                       fallback: Optional[ScoreSet] = None) -> float:
    """EER threshold of probe-vs-template scores, or of the fallback pair scores"""
    if len(embeddings):
        genuine, impostor = probe_scores(templates, embeddings, labels)
        if genuine.size and impostor.size:
            return eer(genuine, impostor)[1]
    if fallback is None:
        raise InsufficientData("No scores available to choose a baseline threshold")
    logger.warning("No validation probes; baseline threshold taken from training pair scores")
    return eer(fallback.genuine, fallback.impostor)[1]


def build_gallery(
    enroll_embeddings,
    enroll_labels: Sequence[str],
    val_embeddings=None,
    val_labels: Sequence[str] = (),
    weights: Optional[ThresholdWeights] = None,
    model_dir: Optional[str] = None,
) -> Gallery:
    """
    Enroll every user and attach an adaptive threshold

    Score statistics come from the enrollment embeddings; the baseline
    threshold comes from validation probes scored against the templates.

    Args:
        enroll_embeddings: Enrollment embeddings [N, D]
        enroll_labels: Identity per enrollment row
        val_embeddings: Validation probe embeddings
        val_labels: Identity per validation row
        weights: Factor weights
        model_dir: Recorded in the gallery for later probe embedding

    Returns:
        Gallery
    """
    weights = weights or ThresholdWeights()
    enroll_embeddings = np.asarray(enroll_embeddings, dtype=np.float64)
    enroll_labels = np.asarray(enroll_labels)
    templates = {str(u): enroll(str(u), enroll_embeddings[enroll_labels == u]) for u in np.unique(enroll_labels)}
    scores = build_scores(enroll_embeddings, enroll_labels)
    val_embeddings = np.zeros((0, enroll_embeddings.shape[1])) if val_embeddings is None else val_embeddings
    tau_b = baseline_threshold(templates, val_embeddings, val_labels, fallback=scores)

    users = {}
    for user, template in templates.items():
        profile = build_profile(user, tau_b, scores, weights)
        users[user] = GalleryEntry(template=template.vector,
                                   **profile.model_dump(exclude={"user"}))
    logger.info("Enrolled %d users (tau_b=%.4f)", len(users), tau_b)
    return Gallery(model_dir=model_dir, users=users)


def gallery_templates(gallery: Gallery) -> Dict[str, Template]:
    return {user: entry.as_template(user) for user, entry in gallery.users.items()}


def save_gallery(gallery: Gallery, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(gallery.model_dump_json(indent=2))
    except OSError as e:
        raise IoFailure(f"Cannot write gallery {path}: {e}") from e
    return path


def load_gallery(path) -> Gallery:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"Gallery not found: {path}", {"path": str(path)})
    try:
        return Gallery.model_validate(json.loads(path.read_text()))
    except ValueError as e:
        raise MalformedHeader(f"Invalid gallery file {path}: {e}") from e


def verify_user(gallery: Gallery, user: str, probe) -> VerificationResult:
    """1:1 verification against a stored gallery entry"""
    if user not in gallery.users:
        raise NoTemplates(f"User '{user}' is not enrolled", {"user": user})
    entry = gallery.users[user]
    return verify(probe, entry.as_template(user), entry.profile(user))


def profiles(gallery: Gallery) -> List[ThresholdProfile]:
    return [entry.profile(user) for user, entry in sorted(gallery.users.items())]
