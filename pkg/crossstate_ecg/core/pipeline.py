"""
Main CrossStateECG Pipeline Orchestrator
Coordinates data loading, preprocessing, training and enrollment for one dataset
"""
import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from crossstate_ecg.core import data_io
from crossstate_ecg.core.adaptive_auth import build_gallery
from crossstate_ecg.core.data_io import Segment
from crossstate_ecg.core.errors import ConfigError, InsufficientData, MalformedHeader, MissingFile
from crossstate_ecg.core.network import CrossStateNet
from crossstate_ecg.core.preprocess import Preprocessor
from crossstate_ecg.core.training import FitResult, Trainer
from crossstate_ecg.models.schemas import DatasetManifest, Gallery, QualityReport, RecordRef, RunConfig, SplitMode
from crossstate_ecg.utils.config import sha256_of, split_digest

logger = logging.getLogger(__name__)

SEGMENT_DIR = "segments"
SEGMENT_INDEX = "segments.json"


@dataclass
class TrainedModel:
    """A fitted network together with the data it was fitted on"""
    net: CrossStateNet
    fit: FitResult
    train: List[Segment]
    val: List[Segment]
    test: List[Segment]
    split_digest: str


def labels_of(segments: Sequence[Segment]) -> np.ndarray:
    return np.array([s.subject_id for s in segments])


class CrossStatePipeline:
    """
    Main CrossStateECG Pipeline
    Turns a dataset directory into trained models, galleries and segment sets
    """

    def __init__(self, config: RunConfig, data_dir=None):
        """
        Initialize CrossStateECG Pipeline

        Args:
            config: Resolved run configuration
            data_dir: Dataset directory, defaults to config.data_dir
        """
        data_dir = data_dir or config.data_dir
        if not data_dir:
            raise ConfigError("No dataset directory given (use --data or set data_dir)",
                              {"fields": [{"field": "data_dir", "message": "missing"}]})
        self.config = config
        self.data_dir = Path(data_dir)
        self.preprocessor = Preprocessor(config.preprocess)
        self._manifest: Optional[DatasetManifest] = None
        self._cache: Dict[str, List[Segment]] = {}
        self._index: Optional[Dict[str, Optional[str]]] = None

    @property
    def preprocess_digest(self) -> str:
        return sha256_of(self.config.preprocess.model_dump(mode="json"))

    def manifest(self) -> DatasetManifest:
        if self._manifest is None:
            self._manifest = data_io.load_manifest(self.data_dir)
        return self._manifest

    # -- segments ---------------------------------------------------------

    def preprocess_dataset(self, out_dir=None) -> Tuple[Path, QualityReport]:
        """
        Preprocess every record and store one segment archive per record

        Args:
            out_dir: Destination, default <data_dir>/segments

        Returns:
            Tuple of (segments.json path, merged QualityReport)
        """
        out_dir = Path(out_dir) if out_dir else self.data_dir / SEGMENT_DIR
        out_dir.mkdir(parents=True, exist_ok=True)
        index: Dict[str, Optional[str]] = {}
        quality = QualityReport()
        for ref in self.manifest().records:
            segments, report = self._preprocess_ref(ref)
            quality = quality.merge(report)
            if segments:
                name = Path(ref.path).with_suffix(data_io.SEGMENT_SUFFIX).name
                data_io.write_segments(segments, out_dir / name)
                index[ref.path] = name
            else:
                logger.warning("Record %s produced no usable segments", ref.path)
                index[ref.path] = None
        index_path = out_dir / SEGMENT_INDEX
        index_path.write_text(json.dumps({
            "preprocess_digest": self.preprocess_digest,
            "records": index,
            "quality": quality.model_dump(mode="json"),
        }, indent=2))
        logger.info("Preprocessed %d records: %d of %d segments passed",
                    len(index), quality.n_passed, quality.n_input)
        return index_path, quality

    def _preprocess_ref(self, ref: RecordRef) -> Tuple[List[Segment], QualityReport]:
        record = data_io.read_record(self.data_dir / ref.path)
        segments, report = self.preprocessor.run(record)
        for seg in segments:
            seg.meta["source"] = ref.path
        return segments, report

    def _segment_index(self) -> Dict[str, Optional[str]]:
        if self._index is None:
            self._index = {}
            path = self.data_dir / SEGMENT_DIR / SEGMENT_INDEX
            if path.is_file():
                try:
                    stored = json.loads(path.read_text())
                except json.JSONDecodeError as e:
                    raise MalformedHeader(f"Invalid segment index {path}: {e}") from e
                if stored.get("preprocess_digest") == self.preprocess_digest:
                    self._index = stored.get("records", {})
                else:
                    logger.info("Stored segments use other preprocessing settings; recomputing")
        return self._index

    def segments_for(self, refs: Sequence[RecordRef]) -> List[Segment]:
        """Segments of the given records, from stored archives when available"""
        index = self._segment_index()
        out: List[Segment] = []
        for ref in refs:
            if ref.path not in self._cache:
                if ref.path in index:
                    name = index[ref.path]
                    self._cache[ref.path] = ([] if name is None else
                                             data_io.read_segments(self.data_dir / SEGMENT_DIR / name))
                else:
                    self._cache[ref.path] = self._preprocess_ref(ref)[0]
            out.extend(self._cache[ref.path])
        return out

    # -- training ---------------------------------------------------------

    def partition(self, mode: SplitMode) -> Tuple[List[RecordRef], List[RecordRef], List[RecordRef]]:
        spec = self.config.split.model_copy(update={"mode": SplitMode(mode)})
        return data_io.partition(self.manifest(), spec)

    def build_network(self, n_subjects: int, ablation: Optional[str] = None) -> CrossStateNet:
        model_config = self.config.model.model_copy(update={"n_subjects": n_subjects})
        if ablation:
            model_config = model_config.with_ablation(ablation)
        return CrossStateNet(model_config, seed=self.config.train.seed)

    def _balanced(self, segments: List[Segment]) -> List[Segment]:
        counts = Counter(s.subject_id for s in segments)
        if len(set(counts.values())) <= 1:
            return segments
        target = max(counts.values())
        logger.info("Augmenting minority subjects up to %d segments", target)
        return data_io.augment_minority(segments, target, self.config.train.seed)

    def train(self, mode: SplitMode, out_dir=None, ablation: Optional[str] = None) -> TrainedModel:
        """
        Partition, load segments and fit a network for one scenario

        Args:
            mode: Experiment scenario
            out_dir: Where history.csv and the checkpoint go
            ablation: Optional ablation name (A1-A5)

        Returns:
            TrainedModel
        """
        train_refs, val_refs, test_refs = self.partition(mode)
        train = self.segments_for(train_refs)
        val = self.segments_for(val_refs)
        test = self.segments_for(test_refs)
        subjects = sorted({s.subject_id for s in train})
        if len(subjects) < 2:
            raise InsufficientData(f"Training needs at least 2 subjects with segments (got {len(subjects)})")
        logger.info("Scenario %s: %d train, %d val, %d test segments over %d subjects",
                    SplitMode(mode).value, len(train), len(val), len(test), len(subjects))

        net = self.build_network(len(subjects), ablation)
        trainer = Trainer(net, self.config.train, self.config.loss)
        fit = trainer.fit(self._balanced(train), val, out_dir)
        return TrainedModel(net=net, fit=fit, train=train, val=val, test=test,
                            split_digest=split_digest(train_refs, val_refs, test_refs))

    # -- enrollment -------------------------------------------------------

    def enroll(self, net: CrossStateNet, enroll_segments: Sequence[Segment],
               val_segments: Sequence[Segment] = (), model_dir=None) -> Gallery:
        """Gallery built from enrollment segments with validation-derived baseline threshold"""
        if not enroll_segments:
            raise InsufficientData("No enrollment segments")
        enroll_emb, _ = net.infer([s.samples for s in enroll_segments])
        val_emb = net.infer([s.samples for s in val_segments])[0] if val_segments else None
        return build_gallery(enroll_emb, labels_of(enroll_segments), val_emb, labels_of(val_segments),
                             self.config.weights, model_dir=None if model_dir is None else str(model_dir))


def probe_embedding(net: CrossStateNet, path, preprocessor: Optional[Preprocessor] = None) -> np.ndarray:
    """
    Embedding for a probe given as an .ecg record or a JSON vector

    A record contributes the normalized mean of its segment embeddings.

    Args:
        net: Trained network
        path: .ecg record or .json file holding a list of floats
        preprocessor: Conditioning settings for records

    Returns:
        Unit-norm embedding
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"Probe not found: {path}", {"path": str(path)})
    if path.suffix == ".json":
        vector = np.asarray(json.loads(path.read_text()), dtype=np.float64).ravel()
        if vector.size != net.config.embedding_dim:
            raise MalformedHeader(f"Probe vector has {vector.size} values, expected {net.config.embedding_dim}")
    else:
        segments, _ = (preprocessor or Preprocessor()).run(data_io.read_record(path))
        if not segments:
            raise InsufficientData(f"Probe record {path} yielded no usable segments")
        vector = net.infer([s.samples for s in segments])[0].mean(axis=0)
    norm = np.linalg.norm(vector)
    if norm == 0:
        raise InsufficientData("Probe embedding is the zero vector")
    return vector / norm
