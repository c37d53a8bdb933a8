"""
Dataset representation and on-disk formats
Records, segments, manifests, synthetic subjects and subject-closed partitioning
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from crossstate_ecg.core.errors import (
    EmptyClass,
    InvalidParams,
    InvalidRecord,
    IoFailure,
    LengthMismatch,
    MalformedHeader,
    MissingFile,
    MissingState,
)
from crossstate_ecg.models.schemas import (
    DatasetManifest,
    EcgState,
    RecordRef,
    SplitMode,
    SplitSpec,
    SubjectParams,
    WaveParams,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
RECORD_SUFFIX = ".ecg"
SEGMENT_SUFFIX = ".seg"
_PAYLOAD_DTYPE = np.dtype("<f4")

# Heart-rate bands per state (bpm)
HR_BANDS: Dict[EcgState, Tuple[float, float]] = {
    EcgState.REST: (60.0, 80.0),
    EcgState.EXERCISE: (90.0, 150.0),
}


@dataclass
class EcgRecord:
    """Raw single-lead recording"""
    subject_id: str
    state: EcgState
    fs_hz: float
    samples: np.ndarray
    lead: str = "II"

    def __post_init__(self):
        self.state = EcgState(self.state)
        self.samples = np.asarray(self.samples, dtype=_PAYLOAD_DTYPE)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidRecord("record samples must be a non-empty 1-D sequence",
                                {"subject": self.subject_id})
        if not self.fs_hz > 0:
            raise InvalidRecord(f"sampling frequency must be positive (got {self.fs_hz})",
                                {"subject": self.subject_id})

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs_hz


@dataclass
class Segment:
    """Fixed-length R-anchored window; the network's input unit"""
    samples: np.ndarray
    subject_id: str
    state: EcgState
    r_index: int
    fs_hz: float
    rr_s: Optional[float] = None
    record_extrema: Optional[Tuple[float, float]] = None
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.state = EcgState(self.state)
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def length(self) -> int:
        return int(self.samples.size)


# ---------------------------------------------------------------------------
# Record files: one JSON header line followed by n little-endian float32 values
# ---------------------------------------------------------------------------

def _encode_header(header: Dict) -> bytes:
    return (json.dumps(header) + "\n").encode("utf-8")


def _split_header(path: Path) -> Tuple[Dict, bytes]:
    if not path.is_file():
        raise MissingFile(f"No such record file: {path}", {"path": str(path)})
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise MalformedHeader(f"Header line not terminated in {path}", {"path": str(path)})
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"Header of {path} is not valid JSON: {e}", {"path": str(path)})
    if not isinstance(header, dict):
        raise MalformedHeader(f"Header of {path} is not a JSON object", {"path": str(path)})
    return header, raw[newline + 1:]


def _require(header: Dict, key: str, kind, path: Path):
    value = header.get(key)
    if value is None or not isinstance(value, kind) or isinstance(value, bool):
        raise MalformedHeader(f"Header field '{key}' missing or invalid in {path}",
                              {"path": str(path), "field": key})
    return value


def read_record(path) -> EcgRecord:
    """
    Read a record file

    Args:
        path: Path to a `.ecg` file

    Returns:
        EcgRecord with samples exactly as stored
    """
    path = Path(path)
    header, payload = _split_header(path)
    subject = _require(header, "subject", str, path)
    fs = _require(header, "fs", (int, float), path)
    n = _require(header, "n", int, path)
    lead = header.get("lead", "II")
    try:
        state = EcgState(header.get("state"))
    except ValueError:
        raise MalformedHeader(f"Header field 'state' invalid in {path}",
                              {"path": str(path), "field": "state"})
    if len(payload) != n * _PAYLOAD_DTYPE.itemsize:
        raise LengthMismatch(
            f"{path} declares {n} samples but carries {len(payload) / _PAYLOAD_DTYPE.itemsize:g}",
            {"path": str(path), "declared": n, "payload_bytes": len(payload)},
        )
    samples = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).copy()
    return EcgRecord(subject_id=subject, state=state, fs_hz=fs, samples=samples, lead=lead)


def write_record(record: EcgRecord, path) -> None:
    """
    Write a record file readable by read_record

    Args:
        record: Record to store
        path: Destination file (its directory must exist)
    """
    path = Path(path)
    samples = np.asarray(record.samples, dtype=_PAYLOAD_DTYPE)
    if samples.size == 0:
        raise InvalidRecord("Refusing to write an empty record", {"subject": record.subject_id})
    fs = int(record.fs_hz) if float(record.fs_hz).is_integer() else float(record.fs_hz)
    header = {
        "subject": record.subject_id,
        "state": EcgState(record.state).value,
        "fs": fs,
        "n": int(samples.size),
        "lead": record.lead,
    }
    try:
        with open(path, "wb") as fh:
            fh.write(_encode_header(header))
            fh.write(samples.astype(_PAYLOAD_DTYPE, copy=False).tobytes())
    except OSError as e:
        raise IoFailure(f"Could not write {path}: {e}", {"path": str(path)})


def write_segments(segments: Sequence[Segment], path) -> None:
    """Store the segments of one record as a single archive"""
    path = Path(path)
    if not segments:
        raise InvalidRecord("Refusing to write an empty segment archive", {"path": str(path)})
    first = segments[0]
    length = first.length
    if any(s.length != length for s in segments):
        raise InvalidRecord("All segments of an archive must share one length", {"path": str(path)})
    fs = int(first.fs_hz) if float(first.fs_hz).is_integer() else float(first.fs_hz)
    header = {
        "subject": first.subject_id,
        "state": first.state.value,
        "fs": fs,
        "n": length,
        "lead": first.meta.get("lead", "II"),
        "r_index": first.r_index,
        "count": len(segments),
        "rr_s": [s.rr_s for s in segments],
    }
    payload = np.stack([s.samples for s in segments]).astype(_PAYLOAD_DTYPE)
    try:
        with open(path, "wb") as fh:
            fh.write(_encode_header(header))
            fh.write(payload.tobytes())
    except OSError as e:
        raise IoFailure(f"Could not write {path}: {e}", {"path": str(path)})


def read_segments(path) -> List[Segment]:
    """Load a segment archive written by write_segments"""
    path = Path(path)
    header, payload = _split_header(path)
    n = _require(header, "n", int, path)
    count = _require(header, "count", int, path)
    r_index = _require(header, "r_index", int, path)
    fs = _require(header, "fs", (int, float), path)
    subject = _require(header, "subject", str, path)
    state = EcgState(header.get("state"))
    if len(payload) != n * count * _PAYLOAD_DTYPE.itemsize:
        raise LengthMismatch(f"{path} payload does not match {count} x {n} samples",
                             {"path": str(path)})
    data = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).reshape(count, n)
    rr = header.get("rr_s") or [None] * count
    lead = header.get("lead", "II")
    return [
        Segment(samples=data[i].astype(np.float64), subject_id=subject, state=state,
                r_index=r_index, fs_hz=fs, rr_s=rr[i], meta={"lead": lead, "source": path.name})
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def load_manifest(data_dir) -> DatasetManifest:
    """Read manifest.json from a dataset directory"""
    path = Path(data_dir) / MANIFEST_NAME
    if not path.is_file():
        raise MissingFile(f"No manifest at {path}", {"path": str(path)})
    manifest = DatasetManifest.model_validate_json(path.read_text())
    for ref in manifest.records:
        if not (Path(data_dir) / ref.path).is_file():
            raise MissingFile(f"Manifest entry not found: {ref.path}", {"path": ref.path})
    return manifest


def save_manifest(manifest: DatasetManifest, data_dir) -> Path:
    """Write manifest.json into a dataset directory"""
    path = Path(data_dir) / MANIFEST_NAME
    try:
        path.write_text(manifest.model_dump_json(indent=2))
    except OSError as e:
        raise IoFailure(f"Could not write {path}: {e}", {"path": str(path)})
    return path


def convert_csv(csv_path, subject_id: str, state: EcgState, fs_hz: float, out_path,
                column: Optional[str] = None, lead: str = "II") -> EcgRecord:
    """
    Convert a pre-exported single-lead CSV into a record file

    Args:
        csv_path: CSV with one amplitude column (header optional)
        subject_id: Subject label
        state: Physiological state
        fs_hz: Sampling frequency of the export
        out_path: Destination `.ecg` file
        column: Column to use when the CSV has several

    Returns:
        The written EcgRecord
    """
    frame = pd.read_csv(csv_path)
    if column is None:
        numeric = frame.select_dtypes(include="number")
        if numeric.shape[1] == 0:
            # headerless single column
            frame = pd.read_csv(csv_path, header=None)
            numeric = frame.select_dtypes(include="number")
        values = numeric.iloc[:, -1].to_numpy()
    else:
        values = frame[column].to_numpy()
    record = EcgRecord(subject_id=subject_id, state=state, fs_hz=fs_hz,
                       samples=values.astype(np.float32), lead=lead)
    write_record(record, out_path)
    return record


# ---------------------------------------------------------------------------
# Synthetic subjects
# ---------------------------------------------------------------------------

def random_subject(seed: int) -> SubjectParams:
    """
    Draw a synthetic identity by perturbing the default beat template

    Args:
        seed: Morphology seed

    Returns:
        SubjectParams with a dominant R wave
    """
    rng = np.random.default_rng(seed)
    base = SubjectParams()
    waves = {}
    for name, wave in base.waves().items():
        amplitude = wave.amplitude * rng.uniform(0.75, 1.25)
        width = wave.width_s * rng.uniform(0.8, 1.2)
        offset = wave.offset_s * rng.uniform(0.85, 1.15)
        waves[name.lower()] = WaveParams(amplitude=amplitude, width_s=width, offset_s=offset)
    # R amplitude drawn last so it stays dominant over |Q| and |S|
    floor = 1.5 * max(abs(waves["q"].amplitude), abs(waves["s"].amplitude))
    waves["r"] = waves["r"].model_copy(update={"amplitude": max(waves["r"].amplitude, floor)})
    return SubjectParams(**waves, baseline_hr_bpm=rng.uniform(60.0, 80.0), morphology_seed=seed)


def _validate_params(params: SubjectParams) -> None:
    for name, wave in params.waves().items():
        if not wave.width_s > 0:
            raise InvalidParams(f"{name} wave width must be positive (got {wave.width_s})",
                                {"wave": name})
    r = abs(params.r.amplitude)
    if r <= abs(params.q.amplitude) or r <= abs(params.s.amplitude):
        raise InvalidParams("R amplitude must dominate Q and S amplitudes")
    if not params.baseline_hr_bpm > 0:
        raise InvalidParams("baseline heart rate must be positive")


def synth_ecg(
    params: SubjectParams,
    state: EcgState,
    duration_s: float,
    noise_std: float,
    seed: int,
    fs_hz: float = 300.0,
    subject_id: Optional[str] = None,
) -> Tuple[EcgRecord, np.ndarray]:
    """
    Generate a Gaussian-bump ECG with exact R-peak ground truth

    Args:
        params: Subject identity
        state: Rest or Exercise; selects the heart-rate band
        duration_s: Record length in seconds
        noise_std: Standard deviation of additive white noise
        seed: Seed for beat timing and noise
        fs_hz: Sampling frequency
        subject_id: Label stored on the record (defaults to the morphology seed)

    Returns:
        Tuple of (record, true R-peak sample indices)
    """
    state = EcgState(state)
    if not duration_s > 0:
        raise InvalidParams(f"duration must be positive (got {duration_s})")
    if noise_std < 0:
        raise InvalidParams(f"noise_std must be non-negative (got {noise_std})")
    _validate_params(params)

    rng = np.random.default_rng([seed, params.morphology_seed])
    lo, hi = HR_BANDS[state]
    if state == EcgState.REST:
        hr_mean = float(np.clip(params.baseline_hr_bpm, lo, hi))
    else:
        hr_mean = float(rng.uniform(lo, hi))
    # exercise shortens every wave and pulls P/T towards the R peak
    compression = min(1.0, params.baseline_hr_bpm / hr_mean)

    n = int(round(duration_s * fs_hz))
    min_rr = int(round(60.0 / hi * fs_hz))
    max_rr = int(round(60.0 / lo * fs_hz))
    peaks = []
    idx = int(round(rng.uniform(0.2, 0.6) * fs_hz))
    while idx < n:
        peaks.append(idx)
        hr_beat = np.clip(hr_mean + rng.normal(0.0, 2.0), lo, hi)
        idx += int(np.clip(round(60.0 / hr_beat * fs_hz), min_rr, max_rr))
    peaks = np.asarray(peaks, dtype=np.int64)

    t = np.arange(n) / fs_hz
    signal = np.zeros(n)
    for wave in params.waves().values():
        width = wave.width_s * compression
        offset = wave.offset_s * compression
        reach = int(np.ceil(6 * width * fs_hz))
        for p in peaks:
            centre = p / fs_hz + offset
            c = int(round(centre * fs_hz))
            lo_i, hi_i = max(0, c - reach), min(n, c + reach + 1)
            if lo_i >= hi_i:
                continue
            tt = t[lo_i:hi_i]
            signal[lo_i:hi_i] += wave.amplitude * np.exp(-0.5 * ((tt - centre) / width) ** 2)
    if noise_std > 0:
        signal += rng.normal(0.0, noise_std, size=n)

    record = EcgRecord(subject_id=subject_id or f"seed{params.morphology_seed}", state=state,
                       fs_hz=fs_hz, samples=signal.astype(np.float32))
    return record, peaks


def synth_dataset(
    n_subjects: int,
    rest_sec: float,
    ex_sec: float,
    seed: int,
    out_dir,
    chunk_sec: float = 30.0,
    fs_hz: float = 300.0,
    noise_std: float = 0.05,
) -> DatasetManifest:
    """
    Write a synthetic dataset directory (records + manifest.json)

    Args:
        n_subjects: Number of synthetic identities
        rest_sec: Seconds of resting recording per subject
        ex_sec: Seconds of post-exercise recording per subject
        seed: Master seed
        out_dir: Output directory (created)
        chunk_sec: Recordings are cut into records of this length
        fs_hz: Sampling frequency
        noise_std: Additive white-noise level

    Returns:
        The saved DatasetManifest
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).generate_state(n_subjects * 3)
    refs: List[RecordRef] = []
    for s in range(n_subjects):
        subject_id = f"s{s + 1:02d}"
        params = random_subject(int(seeds[3 * s]))
        for state, total, state_seed in (
            (EcgState.REST, rest_sec, int(seeds[3 * s + 1])),
            (EcgState.EXERCISE, ex_sec, int(seeds[3 * s + 2])),
        ):
            if total <= 0:
                continue
            n_chunks = max(1, math.ceil(total / chunk_sec - 1e-9))
            for c in range(n_chunks):
                duration = min(chunk_sec, total - c * chunk_sec)
                record, _ = synth_ecg(params, state, duration, noise_std, state_seed + c, fs_hz,
                                      subject_id=subject_id)
                name = f"{subject_id}_{state.value}_{c:03d}{RECORD_SUFFIX}"
                write_record(record, out_dir / name)
                refs.append(RecordRef(path=name, subject_id=subject_id, state=state,
                                      duration_s=record.duration_s))
    manifest = DatasetManifest(records=refs)
    save_manifest(manifest, out_dir)
    logger.info("Synthesized %d records for %d subjects in %s", len(refs), n_subjects, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# Partitioning and augmentation
# ---------------------------------------------------------------------------

def _split_records(records: List[RecordRef], spec: SplitSpec, rng: np.random.Generator):
    order = sorted(records, key=lambda r: r.path)
    perm = rng.permutation(len(order))
    shuffled = [order[i] for i in perm]
    n = len(shuffled)
    n_train = min(n, max(1, int(round(spec.train_fraction * n))))
    n_val = min(n - n_train, int(round(spec.val_fraction * n)))
    return (shuffled[:n_train], shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


def partition(
    manifest: DatasetManifest,
    spec: SplitSpec,
) -> Tuple[List[RecordRef], List[RecordRef], List[RecordRef]]:
    """
    Subject-closed train/val/test partition for one scenario

    Args:
        manifest: Dataset index
        spec: Fractions, seed and scenario

    Returns:
        Tuple of (train, val, test) record references
    """
    if not manifest.records:
        raise MissingState("Manifest is empty")
    mode = SplitMode(spec.mode)
    by_subject: Dict[str, Dict[EcgState, List[RecordRef]]] = {}
    for ref in manifest.records:
        by_subject.setdefault(ref.subject_id, {s: [] for s in EcgState})[ref.state].append(ref)

    needed = set(mode.train_states) | set(mode.test_states)
    for subject, states in sorted(by_subject.items()):
        for state in needed:
            if not states[state]:
                raise MissingState(
                    f"Subject {subject} has no {state.value} records required by {mode.value}",
                    {"subject": subject, "state": state.value},
                )

    rng = np.random.default_rng(spec.seed)
    train, val, test = [], [], []
    for subject in sorted(by_subject):
        states = by_subject[subject]
        if mode.is_cross_state:
            tr, va, _ = _split_records(states[mode.train_states[0]], spec, rng)
            te = sorted(states[mode.test_states[0]], key=lambda r: r.path)
        elif mode == SplitMode.MIX2MIX:
            n_each = min(len(states[EcgState.REST]), len(states[EcgState.EXERCISE]))
            tr, va, te = [], [], []
            for state in (EcgState.REST, EcgState.EXERCISE):
                pool = sorted(states[state], key=lambda r: r.path)
                pool = [pool[i] for i in sorted(rng.permutation(len(pool))[:n_each])]
                a, b, c = _split_records(pool, spec, rng)
                tr, va, te = tr + a, va + b, te + c
        else:
            tr, va, te = _split_records(states[mode.train_states[0]], spec, rng)
        if not mode.is_cross_state and not te:
            te = list(va)
        train += tr
        val += va
        test += te
    logger.info("Partition %s: %d train, %d val, %d test records",
                mode.value, len(train), len(val), len(test))
    return train, val, test


def augment_minority(segments: Sequence[Segment], target_per_class: int, seed: int) -> List[Segment]:
    """
    Top up under-represented subjects with shifted / rescaled copies

    Args:
        segments: Labeled segments
        target_per_class: Minimum count per subject after augmentation
        seed: Seed for the transforms

    Returns:
        Originals followed by augmented copies
    """
    by_class: Dict[str, List[Segment]] = {}
    for seg in segments:
        by_class.setdefault(seg.subject_id, []).append(seg)
    for label, members in by_class.items():
        if not members:
            raise EmptyClass(f"Class {label} has no segments", {"subject": label})

    rng = np.random.default_rng(seed)
    out = list(segments)
    for label in sorted(by_class):
        members = by_class[label]
        for i in range(max(0, target_per_class - len(members))):
            src = members[i % len(members)]
            length = src.length
            max_shift = max(1, int(round(0.05 * length)))
            shift = int(rng.integers(-max_shift, max_shift + 1))
            scale = float(rng.uniform(0.9, 1.1))
            shifted = np.zeros(length)
            if shift >= 0:
                shifted[shift:] = src.samples[:length - shift]
            else:
                shifted[:shift] = src.samples[-shift:]
            meta = dict(src.meta, augmented="1", shift=str(shift), scale=f"{scale:.6f}")
            out.append(Segment(samples=shifted * scale, subject_id=src.subject_id, state=src.state,
                               r_index=src.r_index, fs_hz=src.fs_hz, rr_s=src.rr_s,
                               record_extrema=src.record_extrema, meta=meta))
    return out

