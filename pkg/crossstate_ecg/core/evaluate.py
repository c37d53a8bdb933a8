"""
Scenario Evaluation
Runs one experiment scenario end to end, the ablation series, and writes
report.json / embeddings.csv / table.csv
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from crossstate_ecg.core.adaptive_auth import gallery_templates, probe_scores, save_gallery
from crossstate_ecg.core.data_io import Segment
from crossstate_ecg.core.errors import InsufficientData
from crossstate_ecg.core.metrics import eer, roc_auc
from crossstate_ecg.core.pipeline import CrossStatePipeline, labels_of
from crossstate_ecg.models.schemas import ABLATIONS, Gallery, MetricsReport, SplitMode

logger = logging.getLogger(__name__)

REPORT_NAME = "report.json"
EMBEDDINGS_NAME = "embeddings.csv"
GALLERY_NAME = "gallery.json"
TABLE_NAME = "table.csv"


def adaptive_far_frr(gallery: Gallery, embeddings, labels: Sequence[str]) -> Tuple[float, float]:
    """
    Pooled error rates over every probe x template comparison

    Each comparison is decided with the template owner's adaptive threshold.

    Args:
        gallery: Enrolled users with thresholds
        embeddings: Probe embeddings [N, D]
        labels: True identity per probe

    Returns:
        Tuple of (FAR, FRR) as fractions
    """
    users = sorted(gallery.users)
    templates = np.asarray([gallery.users[u].template for u in users], dtype=np.float64)
    tau = np.asarray([gallery.users[u].tau_p for u in users])
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-300)
    accept = (e @ templates.T) >= tau[None, :]
    own = np.asarray(labels)[:, None] == np.asarray(users)[None, :]
    if not own.any() or own.all():
        raise InsufficientData("Adaptive error rates need both genuine and impostor comparisons")
    return float(accept[~own].mean()), float((~accept[own]).mean())


def identification_accuracy(gallery: Gallery, embeddings, labels: Sequence[str]) -> float:
    """Closed-set nearest-template accuracy (ties to the smaller user id)"""
    users = sorted(gallery.users)
    templates = np.asarray([gallery.users[u].template for u in users], dtype=np.float64)
    predicted = np.asarray(users)[np.argmax(np.asarray(embeddings) @ templates.T, axis=1)]
    return float(np.mean(predicted == np.asarray(labels)))


def write_embeddings(segments: Sequence[Segment], embeddings: np.ndarray, path) -> Path:
    """embeddings.csv: subject, state, then one column per embedding dimension"""
    frame = pd.DataFrame(embeddings, columns=[f"e{i:03d}" for i in range(embeddings.shape[1])])
    frame.insert(0, "state", [s.state.value for s in segments])
    frame.insert(0, "subject", [s.subject_id for s in segments])
    frame.to_csv(path, index=False, float_format="%.8g")
    return Path(path)


def run_scenario(pipeline: CrossStatePipeline, mode: SplitMode, out_dir=None,
                 ablation: Optional[str] = None) -> MetricsReport:
    """
    Train, enroll and score one scenario

    Args:
        pipeline: Dataset and configuration
        mode: Scenario
        out_dir: Run directory for the report, embeddings, gallery and checkpoint
        ablation: Optional ablation name

    Returns:
        MetricsReport
    """
    mode = SplitMode(mode)
    out_dir = Path(out_dir) if out_dir is not None else None
    trained = pipeline.train(mode, out_dir, ablation)
    if not trained.test:
        raise InsufficientData(f"Scenario {mode.value} has no test segments")

    gallery = pipeline.enroll(trained.net, trained.train, trained.val, model_dir=out_dir)
    test_labels = labels_of(trained.test)
    test_emb, test_logits = trained.net.infer([s.samples for s in trained.test])

    acc = identification_accuracy(gallery, test_emb, test_labels)
    classes = np.asarray(trained.fit.classes)
    classifier_acc = float(np.mean(classes[np.argmax(test_logits, axis=1)] == test_labels))
    far, frr = adaptive_far_frr(gallery, test_emb, test_labels)
    genuine, impostor = probe_scores(gallery_templates(gallery), test_emb, test_labels)
    _, auc_value = roc_auc(genuine, impostor)
    eer_value, _ = eer(genuine, impostor)

    report = MetricsReport(
        scenario=mode,
        n_subjects=len(gallery.users),
        acc_pct=100.0 * acc,
        far_pct=100.0 * far,
        frr_pct=100.0 * frr,
        auc_pct=100.0 * auc_value,
        eer_pct=100.0 * eer_value,
        classifier_acc_pct=100.0 * classifier_acc,
        threshold_used=float(np.mean([e.tau_p for e in gallery.users.values()])),
        config_digest=pipeline.config.digest or "",
        split_digest=trained.split_digest,
        ablation=ablation,
    )
    logger.info("%s%s: ACC %.2f%% FAR %.2f%% FRR %.2f%% AUC %.2f%% EER %.2f%%",
                mode.value, f" [{ablation}]" if ablation else "",
                report.acc_pct, report.far_pct, report.frr_pct, report.auc_pct, report.eer_pct)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / REPORT_NAME).write_text(report.model_dump_json(indent=2))
        write_embeddings(trained.test, test_emb, out_dir / EMBEDDINGS_NAME)
        save_gallery(gallery, out_dir / GALLERY_NAME)
    return report


def run_ablation(pipeline: CrossStatePipeline, out_dir=None, names: Sequence[str] = tuple(ABLATIONS),
                 mode: SplitMode = SplitMode.REST2EXERCISE) -> List[MetricsReport]:
    """
    Run the ablation series on identical data and seeds

    Args:
        pipeline: Dataset and configuration
        out_dir: Each ablation gets a sub-directory; table.csv goes here
        names: Ablation names to run
        mode: Scenario shared by all runs

    Returns:
        One MetricsReport per ablation
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    reports = []
    for name in names:
        sub_dir = out_dir / name if out_dir is not None else None
        reports.append(run_scenario(pipeline, mode, sub_dir, ablation=name))
    if out_dir is not None:
        ablation_table(reports).to_csv(out_dir / TABLE_NAME, index=False, float_format="%.4f")
    return reports


def ablation_table(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    rows = []
    for r in reports:
        flags = ABLATIONS[r.ablation] if r.ablation else {}
        rows.append({
            "ablation": r.ablation,
            "multi_scale": flags.get("use_multi_scale", True),
            "deep_conv": flags.get("use_deep_conv", True),
            "attention": flags.get("use_attention", True),
            "acc_pct": r.acc_pct,
            "far_pct": r.far_pct,
            "frr_pct": r.frr_pct,
            "auc_pct": r.auc_pct,
            "eer_pct": r.eer_pct,
            "classifier_acc_pct": r.classifier_acc_pct,
            "split_digest": r.split_digest,
        })
    return pd.DataFrame(rows)
