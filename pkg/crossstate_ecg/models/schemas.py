"""
Pydantic models for configuration, validation and reporting
"""
from typing import Dict, List, Literal, Optional
from enum import Enum
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class EcgState(str, Enum):
    """Physiological state of a recording"""
    REST = "rest"
    EXERCISE = "exercise"


class SplitMode(str, Enum):
    """Train-test scenarios"""
    REST2REST = "rest2rest"
    EXERCISE2EXERCISE = "exercise2exercise"
    MIX2MIX = "mix2mix"
    REST2EXERCISE = "rest2exercise"
    EXERCISE2REST = "exercise2rest"

    @property
    def train_states(self) -> List[EcgState]:
        if self in (SplitMode.REST2REST, SplitMode.REST2EXERCISE):
            return [EcgState.REST]
        if self in (SplitMode.EXERCISE2EXERCISE, SplitMode.EXERCISE2REST):
            return [EcgState.EXERCISE]
        return [EcgState.REST, EcgState.EXERCISE]

    @property
    def test_states(self) -> List[EcgState]:
        if self == SplitMode.REST2EXERCISE:
            return [EcgState.EXERCISE]
        if self == SplitMode.EXERCISE2REST:
            return [EcgState.REST]
        return self.train_states

    @property
    def is_cross_state(self) -> bool:
        return self in (SplitMode.REST2EXERCISE, SplitMode.EXERCISE2REST)


class FilterKind(str, Enum):
    """Supported Butterworth responses"""
    BANDPASS = "bandpass"
    HIGHPASS = "highpass"


class RejectionReason(str, Enum):
    """Quality-control rejection reasons"""
    CLIPPED = "clipped"
    LOW_SNR = "low_snr"
    BAD_RR = "bad_rr"
    BOUNDARY_TRUNCATED = "boundary_truncated"


class Decision(str, Enum):
    """Verification outcome"""
    ACCEPT = "accept"
    REJECT = "reject"


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

class WaveParams(BaseModel):
    """One Gaussian bump of the beat template (offset relative to the R peak)"""
    amplitude: float
    width_s: float
    offset_s: float


class SubjectParams(BaseModel):
    """Synthetic-subject identity model"""
    p: WaveParams = WaveParams(amplitude=0.15, width_s=0.025, offset_s=-0.20)
    q: WaveParams = WaveParams(amplitude=-0.12, width_s=0.010, offset_s=-0.030)
    r: WaveParams = WaveParams(amplitude=1.00, width_s=0.010, offset_s=0.0)
    s: WaveParams = WaveParams(amplitude=-0.25, width_s=0.010, offset_s=0.030)
    t: WaveParams = WaveParams(amplitude=0.30, width_s=0.040, offset_s=0.26)
    baseline_hr_bpm: float = 70.0
    morphology_seed: int = 0

    def waves(self) -> Dict[str, WaveParams]:
        return {"P": self.p, "Q": self.q, "R": self.r, "S": self.s, "T": self.t}


class RecordRef(BaseModel):
    """Manifest entry pointing at one recording"""
    path: str
    subject_id: str
    state: EcgState
    duration_s: float = Field(..., ge=0)


class DatasetManifest(BaseModel):
    """Dataset directory index"""
    records: List[RecordRef] = Field(default_factory=list)
    schema_version: int = 1

    def subjects(self) -> List[str]:
        return sorted({r.subject_id for r in self.records})


class SplitSpec(BaseModel):
    """Subject-closed partition request"""
    train_fraction: float = Field(0.8, gt=0, lt=1)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    seed: int = 42
    mode: SplitMode = SplitMode.REST2EXERCISE

    @model_validator(mode="after")
    def _fractions_fit(self):
        if self.train_fraction + self.val_fraction > 1.0 + 1e-9:
            raise ValueError("train_fraction + val_fraction must not exceed 1")
        return self


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

class QualityConfig(BaseModel):
    """Quality gate rules"""
    clip_run: int = Field(5, ge=1)
    min_qrs_power_ratio: float = Field(0.05, ge=0, le=1)
    qrs_band_hz: List[float] = [5.0, 15.0]
    min_bpm: float = Field(40.0, gt=0)
    max_bpm: float = Field(220.0, gt=0)

    @model_validator(mode="after")
    def _ranges(self):
        if len(self.qrs_band_hz) != 2 or not 0 < self.qrs_band_hz[0] < self.qrs_band_hz[1]:
            raise ValueError("qrs_band_hz must be two ascending positive frequencies")
        if self.min_bpm >= self.max_bpm:
            raise ValueError("min_bpm must be below max_bpm")
        return self


class PreprocessConfig(BaseModel):
    """Filtering, segmentation and quality settings"""
    bandpass_order: int = Field(4, ge=1)
    bandpass_hz: List[float] = [0.5, 40.0]
    highpass_order: int = Field(1, ge=1)
    highpass_hz: float = Field(0.5, gt=0)
    rest_segment_s: float = Field(6.0, gt=0)
    exercise_segment_s: float = Field(4.0, gt=0)
    r_position: float = Field(0.25, gt=0, lt=1)
    quality: QualityConfig = QualityConfig()

    @field_validator("bandpass_hz")
    @classmethod
    def _ascending(cls, v: List[float]) -> List[float]:
        if len(v) != 2 or not 0 < v[0] < v[1]:
            raise ValueError("bandpass_hz must be two ascending positive frequencies")
        return v


class QualityReport(BaseModel):
    """Segment accounting for one or more records"""
    n_input: int = 0
    n_passed: int = 0
    rejections: Dict[RejectionReason, int] = Field(
        default_factory=lambda: {reason: 0 for reason in RejectionReason}
    )

    @model_validator(mode="after")
    def _reconciles(self):
        for reason in RejectionReason:
            self.rejections.setdefault(reason, 0)
        if self.n_passed + sum(self.rejections.values()) != self.n_input:
            raise ValueError("n_passed + rejections must equal n_input")
        return self

    def merge(self, other: "QualityReport") -> "QualityReport":
        return QualityReport(
            n_input=self.n_input + other.n_input,
            n_passed=self.n_passed + other.n_passed,
            rejections={
                reason: self.rejections[reason] + other.rejections[reason]
                for reason in RejectionReason
            },
        )


# ---------------------------------------------------------------------------
# Model, loss and training
# ---------------------------------------------------------------------------

ABLATIONS: Dict[str, Dict[str, bool]] = {
    "A1": {"use_multi_scale": True, "use_deep_conv": True, "use_attention": True},
    "A2": {"use_multi_scale": False, "use_deep_conv": True, "use_attention": True},
    "A3": {"use_multi_scale": True, "use_deep_conv": False, "use_attention": True},
    "A4": {"use_multi_scale": True, "use_deep_conv": True, "use_attention": False},
    "A5": {"use_multi_scale": False, "use_deep_conv": True, "use_attention": False},
}


class ModelConfig(BaseModel):
    """Network architecture"""
    branch_kernels: List[int] = [3, 5, 7, 11]
    branch_channels: int = Field(64, ge=1)
    deep_channels: List[int] = [256, 512]
    attention_reduction: int = Field(8, ge=1)
    embedding_dim: int = Field(128, ge=1)
    n_subjects: Optional[int] = Field(None, ge=2)
    use_multi_scale: bool = True
    use_deep_conv: bool = True
    use_attention: bool = True
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _shapes_consistent(self):
        if not self.branch_kernels or any(k < 1 or k % 2 == 0 for k in self.branch_kernels):
            raise ValueError("branch_kernels must be positive odd integers")
        if len(self.deep_channels) != 2 or min(self.deep_channels) < 1:
            raise ValueError("deep_channels must hold two positive channel counts")
        if self.deep_channels[0] != self.branch_channels * len(self.branch_kernels):
            raise ValueError("deep_channels[0] must equal branch_channels * len(branch_kernels)")
        if self.deep_channels[1] % self.attention_reduction != 0:
            raise ValueError("attention_reduction must divide deep_channels[1]")
        return self

    @property
    def fused_channels(self) -> int:
        return self.deep_channels[0]

    @property
    def feature_channels(self) -> int:
        return self.deep_channels[1]

    @property
    def attention_channels(self) -> int:
        return self.deep_channels[1] // self.attention_reduction

    def with_ablation(self, name: str) -> "ModelConfig":
        """Return a copy with the named ablation flags (A1-A5) applied"""
        if name not in ABLATIONS:
            raise ValueError(f"Unknown ablation '{name}' (expected one of {sorted(ABLATIONS)})")
        return self.model_copy(update=ABLATIONS[name])


class LossConfig(BaseModel):
    """Combined focal + multi-similarity objective"""
    alpha: float = Field(0.05, ge=0, le=1)
    lambda_thresh: float = 0.5
    tau_clip: float = Field(1.0, gt=0)
    beta_p: float = Field(2.0, gt=0)
    beta_n: float = Field(50.0, gt=0)
    eps: float = Field(1e-8, ge=0)
    focal_gamma: float = Field(2.0, ge=0)


class PlateauConfig(BaseModel):
    """Reduce-on-plateau schedule"""
    factor: float = Field(0.5, gt=0, lt=1)
    patience: int = Field(10, ge=1)
    min_lr: float = Field(1e-6, ge=0)
    threshold: float = Field(1e-4, ge=0)
    monitored: Literal["val_loss"] = "val_loss"


class AdamConfig(BaseModel):
    """Adam hyper-parameters"""
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class SamplerConfig(BaseModel):
    """P x K class-balanced sampler"""
    classes_per_batch: int = Field(8, ge=2)
    samples_per_class: int = Field(4, ge=2)


class TrainConfig(BaseModel):
    """Optimization loop settings"""
    lr: float = Field(4e-4, gt=0)
    batch_size: int = Field(32, ge=2)
    epochs: int = Field(200, ge=1)
    seed: int = 42
    plateau: PlateauConfig = PlateauConfig()
    adam: AdamConfig = AdamConfig()
    sampler: SamplerConfig = SamplerConfig()

    @model_validator(mode="after")
    def _batch_matches_sampler(self):
        pk = self.sampler.classes_per_batch * self.sampler.samples_per_class
        if pk != self.batch_size:
            raise ValueError(
                f"classes_per_batch * samples_per_class ({pk}) must equal batch_size ({self.batch_size})"
            )
        return self


class EpochRecord(BaseModel):
    """One row of history.csv"""
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float


# ---------------------------------------------------------------------------
# Authentication
# ---------------------------------------------------------------------------

class ThresholdWeights(BaseModel):
    """Global / personal / local factor weights"""
    w_g: float = Field(0.5, ge=0)
    w_p: float = Field(0.3, ge=0)
    w_l: float = Field(0.2, ge=0)


class ThresholdProfile(BaseModel):
    """Per-user adaptive threshold and its contributing factors"""
    user: str
    tau_b: float
    f_g: float
    f_p: float
    f_l: float
    weights: ThresholdWeights
    raw_tau_p: float
    tau_p: float
    clamped: bool = False


class Template(BaseModel):
    """Enrolled identity template"""
    user: str
    vector: List[float]

    @field_validator("vector")
    @classmethod
    def _unit_norm(cls, v: List[float]) -> List[float]:
        norm = sum(x * x for x in v) ** 0.5
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"template vector must have unit norm (got {norm:.8f})")
        return v


class VerificationResult(BaseModel):
    """Outcome of a 1:1 comparison"""
    user: str
    decision: Decision
    score: float
    threshold: float


class IdentificationResult(BaseModel):
    """Outcome of a 1:N search"""
    user: str
    score: float


class GalleryEntry(BaseModel):
    """Stored enrollment for one user"""
    template: List[float]
    tau_b: float
    raw_tau_p: float
    tau_p: float
    f_g: float
    f_p: float
    f_l: float
    weights: ThresholdWeights
    clamped: bool = False

    def profile(self, user: str) -> ThresholdProfile:
        return ThresholdProfile(user=user, **self.model_dump(exclude={"template"}))

    def as_template(self, user: str) -> Template:
        return Template(user=user, vector=self.template)


class Gallery(BaseModel):
    """gallery.json contents"""
    model_dir: Optional[str] = None
    users: Dict[str, GalleryEntry] = Field(default_factory=dict)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

class RocCurve(BaseModel):
    """ROC sweep (threshold, FAR, TPR)"""
    thresholds: List[float]
    far: List[float]
    tpr: List[float]

    @model_validator(mode="after")
    def _ordered(self):
        if not len(self.thresholds) == len(self.far) == len(self.tpr):
            raise ValueError("ROC arrays must have equal length")
        if any(b >= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("ROC thresholds must be strictly decreasing")
        if any(b < a for a, b in zip(self.far, self.far[1:])):
            raise ValueError("ROC FAR must be non-decreasing")
        return self


class MetricsReport(BaseModel):
    """Scenario result, all rates in percent"""
    scenario: SplitMode
    n_subjects: int
    acc_pct: float = Field(..., ge=0, le=100)
    far_pct: float = Field(..., ge=0, le=100)
    frr_pct: float = Field(..., ge=0, le=100)
    auc_pct: float = Field(..., ge=0, le=100)
    eer_pct: float = Field(..., ge=0, le=100)
    classifier_acc_pct: float = Field(..., ge=0, le=100)
    threshold_used: float
    config_digest: str
    split_digest: str
    ablation: Optional[str] = None


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

class RunConfig(BaseModel):
    """Everything one experiment needs"""
    model_config = ConfigDict(protected_namespaces=())

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    loss: LossConfig = LossConfig()
    weights: ThresholdWeights = ThresholdWeights()
    preprocess: PreprocessConfig = PreprocessConfig()
    split: SplitSpec = SplitSpec()
    data_dir: Optional[str] = None
    digest: Optional[str] = None
