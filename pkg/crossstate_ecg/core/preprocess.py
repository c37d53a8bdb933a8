"""
Signal conditioning and segmentation
Butterworth filtering, baseline correction, Z-score normalization, QRS detection,
state-aware R-anchored windowing and quality gating
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from crossstate_ecg.core.data_io import EcgRecord, Segment
from crossstate_ecg.core.errors import DegenerateSignal, InvalidCutoff, UnstableResult
from crossstate_ecg.models.schemas import (
    EcgState,
    FilterKind,
    PreprocessConfig,
    QualityConfig,
    QualityReport,
    RejectionReason,
)

logger = logging.getLogger(__name__)

ZSCORE_TOL = 1e-9


@dataclass(frozen=True)
class IirFilter:
    """Digital IIR filter; `b`/`a` are the transfer-function coefficients (a[0] = 1)"""
    b: np.ndarray
    a: np.ndarray
    sos: np.ndarray
    poles: np.ndarray

    @property
    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles) < 1.0))


def design_butterworth(order: int, kind: FilterKind, cutoffs_hz: Sequence[float], fs_hz: float) -> IirFilter:
    """
    Design a digital Butterworth filter

    Analog prototype, frequency transformation at pre-warped edges, bilinear transform.

    Args:
        order: Prototype order
        kind: Bandpass (two cutoffs) or Highpass (one cutoff)
        cutoffs_hz: Edge frequencies in Hz
        fs_hz: Sampling frequency in Hz

    Returns:
        Stable IirFilter
    """
    kind = FilterKind(kind)
    cutoffs = np.atleast_1d(np.asarray(cutoffs_hz, dtype=float))
    nyquist = fs_hz / 2.0
    if order < 1:
        raise InvalidCutoff(f"Filter order must be positive (got {order})")
    if np.any(cutoffs <= 0) or np.any(cutoffs >= nyquist):
        raise InvalidCutoff(f"Cutoffs {cutoffs.tolist()} must lie in (0, {nyquist})",
                            {"cutoffs": cutoffs.tolist(), "fs": fs_hz})
    if kind == FilterKind.BANDPASS and (cutoffs.size != 2 or cutoffs[0] >= cutoffs[1]):
        raise InvalidCutoff("Bandpass needs two ascending cutoffs", {"cutoffs": cutoffs.tolist()})
    if kind == FilterKind.HIGHPASS and cutoffs.size != 1:
        raise InvalidCutoff("Highpass needs exactly one cutoff", {"cutoffs": cutoffs.tolist()})

    z, p, k = signal.buttap(order)
    warped = 2.0 * fs_hz * np.tan(np.pi * cutoffs / fs_hz)
    if kind == FilterKind.BANDPASS:
        bw = warped[1] - warped[0]
        wo = np.sqrt(warped[0] * warped[1])
        z, p, k = signal.lp2bp_zpk(z, p, k, wo=wo, bw=bw)
    else:
        z, p, k = signal.lp2hp_zpk(z, p, k, wo=warped[0])
    z, p, k = signal.bilinear_zpk(z, p, k, fs=fs_hz)

    b, a = signal.zpk2tf(z, p, k)
    sos = signal.zpk2sos(z, p, k)
    filt = IirFilter(b=np.real(b), a=np.real(a), sos=sos, poles=p)
    if not filt.is_stable or not np.all(np.isfinite(filt.b)) or not np.all(np.isfinite(filt.a)):
        raise UnstableResult("Designed filter has poles on or outside the unit circle",
                             {"order": order, "cutoffs": cutoffs.tolist(), "fs": fs_hz})
    return filt


def filter_forward(filt: IirFilter, x) -> np.ndarray:
    """
    Apply a filter causally with zero initial conditions

    Args:
        filt: Designed filter
        x: Input signal

    Returns:
        Filtered signal of the same length
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DegenerateSignal("Cannot filter an empty signal")
    return signal.sosfilt(filt.sos, x)


def zscore(x) -> np.ndarray:
    """
    Standardize to zero mean and unit population standard deviation

    Args:
        x: Input signal

    Returns:
        Normalized signal
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DegenerateSignal("Cannot normalize an empty signal")
    std = x.std()
    if std <= ZSCORE_TOL:
        raise DegenerateSignal(f"Signal is constant (std={std:.3g})", {"std": float(std)})
    return (x - x.mean()) / std


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def detect_r_peaks(x, fs_hz: float) -> np.ndarray:
    """
    QRS detection on a bandpass-filtered signal

    Derivative, squaring and 150 ms moving-window integration followed by adaptive
    signal/noise thresholds with a 200 ms refractory period, T-wave discrimination
    and search-back at half threshold. Candidates are the integrated-energy maxima at
    least one refractory period apart. Each detection is moved to the steepest slope
    inside its integration window, then to the signal maximum within +/-50 ms.

    Args:
        x: Filtered ECG
        fs_hz: Sampling frequency

    Returns:
        Strictly increasing R-peak sample indices
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n == 0 or not np.any(x):
        return np.zeros(0, dtype=np.int64)

    # five-point derivative, centred
    deriv = np.convolve(x, np.array([1.0, 2.0, 0.0, -2.0, -1.0]) / 8.0, mode="same")
    squared = deriv ** 2
    win = max(1, _round_half_up(0.150 * fs_hz))
    mwi = np.convolve(squared, np.ones(win) / win, mode="same")

    refractory = max(1, _round_half_up(0.200 * fs_hz))
    t_wave_window = _round_half_up(0.360 * fs_hz)
    slope_window = max(1, _round_half_up(0.075 * fs_hz))
    # one candidate per integration hump: the highest maximum within a refractory period
    candidates, _ = signal.find_peaks(mwi, distance=refractory)
    if candidates.size == 0:
        return np.zeros(0, dtype=np.int64)

    init = mwi[: min(n, _round_half_up(2.0 * fs_hz))]
    spki = init.max() / 3.0
    npki = init.mean() / 2.0
    if spki <= 0:
        return np.zeros(0, dtype=np.int64)

    def max_slope(i: int) -> float:
        return float(np.max(np.abs(deriv[max(0, i - slope_window): i + slope_window + 1])))

    qrs: List[int] = []
    rr: List[int] = []
    pending: List[int] = []  # noise candidates since the last QRS, for search-back
    last_slope = 0.0
    for c in candidates:
        th1 = npki + 0.25 * (spki - npki)
        th2 = 0.5 * th1
        value = mwi[c]

        # search-back once 1.66 mean RR has elapsed without a detection
        if qrs and rr:
            rr_mean = float(np.mean(rr[-8:]))
            if c - qrs[-1] > 1.66 * rr_mean:
                missed = [p for p in pending if p - qrs[-1] >= refractory and mwi[p] > th2]
                if missed:
                    best = max(missed, key=lambda p: mwi[p])
                    rr.append(best - qrs[-1])
                    qrs.append(best)
                    last_slope = max_slope(best)
                    spki = 0.25 * mwi[best] + 0.75 * spki
                    pending = [p for p in pending if p > best]
                    th1 = npki + 0.25 * (spki - npki)

        if value > th1 and (not qrs or c - qrs[-1] >= refractory):
            slope = max_slope(c)
            if qrs and c - qrs[-1] < t_wave_window and slope < 0.5 * last_slope:
                npki = 0.125 * value + 0.875 * npki
                continue
            if qrs:
                rr.append(c - qrs[-1])
            qrs.append(int(c))
            last_slope = slope
            spki = 0.125 * value + 0.875 * spki
            pending = []
        else:
            npki = 0.125 * value + 0.875 * npki
            pending.append(int(c))

    half = max(1, _round_half_up(0.050 * fs_hz))
    refined: List[int] = []
    for c in qrs:
        # the integration hump is wider than the QRS; anchor on its steepest slope first
        lo, hi = max(0, c - win // 2), min(n, c + win // 2 + 1)
        steepest = lo + int(np.argmax(squared[lo:hi]))
        lo, hi = max(0, steepest - half), min(n, steepest + half + 1)
        r = lo + int(np.argmax(x[lo:hi]))
        if refined and r - refined[-1] < refractory:
            if x[r] > x[refined[-1]]:
                refined[-1] = r
            continue
        refined.append(r)
    return np.asarray(refined, dtype=np.int64)


def segment_length(state: EcgState, fs_hz: float, config: Optional[PreprocessConfig] = None) -> int:
    """Window length for a state: 6 s at rest, 4 s after exercise"""
    config = config or PreprocessConfig()
    seconds = config.rest_segment_s if EcgState(state) == EcgState.REST else config.exercise_segment_s
    return _round_half_up(seconds * fs_hz)


def segment_around_peaks(
    x,
    peaks: Sequence[int],
    state: EcgState,
    fs_hz: float,
    subject: str,
    config: Optional[PreprocessConfig] = None,
) -> List[Segment]:
    """
    Cut R-anchored windows with the R peak at 25% of the window

    Args:
        x: Conditioned signal
        peaks: Ascending R-peak indices
        state: Selects the window length
        fs_hz: Sampling frequency
        subject: Subject label
        config: Segmentation settings

    Returns:
        Segments whose windows fit inside the signal; others are dropped
    """
    config = config or PreprocessConfig()
    x = np.asarray(x, dtype=np.float64)
    peaks = np.asarray(peaks, dtype=np.int64)
    length = segment_length(state, fs_hz, config)
    pre = _round_half_up(config.r_position * length)
    extrema = (float(x.min()), float(x.max())) if x.size else None
    segments = []
    for i, p in enumerate(peaks):
        start, stop = int(p) - pre, int(p) - pre + length
        if start < 0 or stop > x.size:
            continue
        if i > 0:
            rr_s = (p - peaks[i - 1]) / fs_hz
        elif peaks.size > 1:
            rr_s = (peaks[1] - p) / fs_hz
        else:
            rr_s = None
        segments.append(Segment(
            samples=x[start:stop].copy(),
            subject_id=subject,
            state=state,
            r_index=pre,
            fs_hz=fs_hz,
            rr_s=None if rr_s is None else float(rr_s),
            record_extrema=extrema,
        ))
    return segments


def _longest_run_at(values: np.ndarray, level: float) -> int:
    hits = np.isclose(values, level, rtol=0.0, atol=1e-12 * max(1.0, abs(level)))
    best = run = 0
    for hit in hits:
        run = run + 1 if hit else 0
        best = max(best, run)
    return best


def _rejection_reason(seg: Segment, config: QualityConfig) -> Optional[RejectionReason]:
    x = seg.samples
    lo, hi = seg.record_extrema if seg.record_extrema is not None else (x.min(), x.max())
    if max(_longest_run_at(x, hi), _longest_run_at(x, lo)) >= config.clip_run:
        return RejectionReason.CLIPPED

    freqs, power = signal.periodogram(x, fs=seg.fs_hz, detrend="constant")
    total = power.sum()
    band = (freqs >= config.qrs_band_hz[0]) & (freqs <= config.qrs_band_hz[1])
    if total <= 0 or power[band].sum() / total < config.min_qrs_power_ratio:
        return RejectionReason.LOW_SNR

    if seg.rr_s is not None:
        bpm = 60.0 / seg.rr_s if seg.rr_s > 0 else np.inf
        if not config.min_bpm <= bpm <= config.max_bpm:
            return RejectionReason.BAD_RR
    return None


def quality_gate(
    segments: Sequence[Segment],
    config: Optional[QualityConfig] = None,
) -> Tuple[List[Segment], QualityReport]:
    """
    Reject clipped, low-SNR and implausible-rhythm segments

    Args:
        segments: Candidate segments
        config: Gate thresholds

    Returns:
        Tuple of (passed segments, QualityReport)
    """
    config = config or QualityConfig()
    rejections = {reason: 0 for reason in RejectionReason}
    passed = []
    for seg in segments:
        reason = _rejection_reason(seg, config)
        if reason is None:
            passed.append(seg)
        else:
            rejections[reason] += 1
    report = QualityReport(n_input=len(segments), n_passed=len(passed), rejections=rejections)
    return passed, report


class Preprocessor:
    """
    Record-level conditioning pipeline
    bandpass -> highpass -> zscore -> detect_r_peaks -> segment_around_peaks -> quality_gate
    """

    def __init__(self, config: Optional[PreprocessConfig] = None):
        """
        Initialize Preprocessor

        Args:
            config: Filtering, segmentation and quality settings
        """
        self.config = config or PreprocessConfig()
        self._filters = {}

    def filters(self, fs_hz: float) -> Tuple[IirFilter, IirFilter]:
        """Bandpass and baseline high-pass for a sampling rate (cached)"""
        if fs_hz not in self._filters:
            self._filters[fs_hz] = (
                design_butterworth(self.config.bandpass_order, FilterKind.BANDPASS,
                                   self.config.bandpass_hz, fs_hz),
                design_butterworth(self.config.highpass_order, FilterKind.HIGHPASS,
                                   [self.config.highpass_hz], fs_hz),
            )
        return self._filters[fs_hz]

    def condition(self, record: EcgRecord) -> np.ndarray:
        """Filtered and normalized signal"""
        bandpass, highpass = self.filters(record.fs_hz)
        x = filter_forward(bandpass, record.samples)
        x = filter_forward(highpass, x)
        return zscore(x)

    def run(self, record: EcgRecord) -> Tuple[List[Segment], QualityReport]:
        """
        Preprocess one record

        Args:
            record: Raw recording

        Returns:
            Tuple of (accepted segments, QualityReport including boundary drops)
        """
        x = self.condition(record)
        peaks = detect_r_peaks(x, record.fs_hz)
        segments = segment_around_peaks(x, peaks, record.state, record.fs_hz,
                                        record.subject_id, self.config)
        for seg in segments:
            seg.meta["lead"] = record.lead
        passed, gate_report = quality_gate(segments, self.config.quality)
        rejections = dict(gate_report.rejections)
        rejections[RejectionReason.BOUNDARY_TRUNCATED] += len(peaks) - len(segments)
        report = QualityReport(n_input=len(peaks), n_passed=len(passed), rejections=rejections)
        logger.debug("Record %s/%s: %d peaks, %d segments passed",
                     record.subject_id, record.state.value, len(peaks), len(passed))
        return passed, report


def preprocess_record(record: EcgRecord, config: Optional[PreprocessConfig] = None) -> Tuple[List[Segment], QualityReport]:
    """Functional form of Preprocessor.run"""
    return Preprocessor(config).run(record)
