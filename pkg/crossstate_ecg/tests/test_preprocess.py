"""
Tests for filtering, R-peak detection, segmentation and quality gating
Run with: pytest crossstate_ecg/tests/test_preprocess.py
"""
import numpy as np
import pytest
from scipy import signal

from crossstate_ecg.core import data_io
from crossstate_ecg.core.data_io import EcgRecord, Segment
from crossstate_ecg.core.errors import DegenerateSignal, InvalidCutoff
from crossstate_ecg.core.preprocess import (
    Preprocessor,
    design_butterworth,
    detect_r_peaks,
    filter_forward,
    preprocess_record,
    quality_gate,
    segment_around_peaks,
    segment_length,
    zscore,
)
from crossstate_ecg.models.schemas import (
    EcgState,
    FilterKind,
    PreprocessConfig,
    QualityConfig,
    RejectionReason,
    SubjectParams,
)

FS = 300.0


def _gain(filt, freq_hz, fs=FS):
    _, h = signal.freqz(filt.b, filt.a, worN=[freq_hz], fs=fs)
    return abs(h[0])


class TestButterworth:
    """Tests for digital Butterworth design"""

    def test_bandpass_matches_scipy(self):
        """Test coefficients agree with scipy's reference design"""
        filt = design_butterworth(4, FilterKind.BANDPASS, [0.5, 40.0], FS)
        b, a = signal.butter(4, [0.5, 40.0], btype="bandpass", fs=FS)

        assert np.allclose(filt.b, b, rtol=1e-6, atol=1e-12)
        assert np.allclose(filt.a, a, rtol=1e-6, atol=1e-10)
        assert filt.a[0] == pytest.approx(1.0)

    def test_highpass_matches_scipy(self):
        """Test first-order high-pass coefficients"""
        filt = design_butterworth(1, FilterKind.HIGHPASS, [0.5], FS)
        b, a = signal.butter(1, 0.5, btype="highpass", fs=FS)

        assert np.allclose(filt.b, b)
        assert np.allclose(filt.a, a)

    def test_passband_and_stopband_gain(self):
        """Test 10 Hz passes while 0.05 Hz and 120 Hz are attenuated"""
        filt = design_butterworth(4, FilterKind.BANDPASS, [0.5, 40.0], FS)

        assert _gain(filt, 10.0) == pytest.approx(1.0, abs=0.05)
        assert _gain(filt, 0.05) <= 0.1
        assert _gain(filt, 120.0) <= 0.1

    def test_poles_inside_unit_circle(self):
        """Test the designed filter is stable"""
        filt = design_butterworth(4, FilterKind.BANDPASS, [0.5, 40.0], FS)

        assert filt.is_stable
        assert filt.poles.size == 8

    def test_cutoff_above_nyquist(self):
        """Test cutoffs at or beyond Nyquist are rejected"""
        with pytest.raises(InvalidCutoff):
            design_butterworth(4, FilterKind.BANDPASS, [0.5, 150.0], FS)

    def test_descending_band(self):
        """Test a reversed band is rejected"""
        with pytest.raises(InvalidCutoff):
            design_butterworth(2, FilterKind.BANDPASS, [40.0, 0.5], FS)

    def test_filter_forward_matches_lfilter(self):
        """Test SOS application equals direct-form filtering"""
        filt = design_butterworth(2, FilterKind.BANDPASS, [1.0, 30.0], FS)
        x = np.random.default_rng(0).normal(size=600)

        assert np.allclose(filter_forward(filt, x), signal.lfilter(filt.b, filt.a, x), atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_filter_forward_is_shift_invariant_and_linear(self, seed):
        """Test a delayed input gives the delayed output and superposition holds"""
        rng = np.random.default_rng(seed)
        filt = design_butterworth(4, FilterKind.BANDPASS, [0.5, 40.0], FS)
        x, y = rng.normal(size=900), rng.normal(size=900)
        delay = int(rng.integers(1, 200))
        a, b = rng.normal(size=2)
        base = filter_forward(filt, x)
        delayed = filter_forward(filt, np.concatenate([np.zeros(delay), x]))

        assert np.allclose(delayed[:delay], 0.0)
        assert np.allclose(delayed[delay:], base, atol=1e-10)
        assert np.allclose(filter_forward(filt, a * x + b * y),
                           a * base + b * filter_forward(filt, y), atol=1e-9)

    def test_filter_forward_rejects_empty(self):
        """Test filtering an empty signal"""
        filt = design_butterworth(1, FilterKind.HIGHPASS, [0.5], FS)
        with pytest.raises(DegenerateSignal):
            filter_forward(filt, np.zeros(0))


class TestZscore:
    """Tests for Z-score normalization"""

    def test_zero_mean_unit_std(self):
        """Test output moments"""
        z = zscore(np.random.default_rng(1).normal(3.0, 2.0, size=500))

        assert abs(z.mean()) < 1e-12
        assert z.std() == pytest.approx(1.0)

    def test_constant_signal(self):
        """Test a constant signal is degenerate"""
        with pytest.raises(DegenerateSignal):
            zscore(np.full(10, 4.0))


def _conditioned(state, seed=0, duration=60.0, noise=0.05, params=None):
    record, truth = data_io.synth_ecg(params or SubjectParams(), state, duration, noise, seed=seed)
    return Preprocessor().condition(record), truth, record


def _sensitivity(detected, truth, tol):
    hits = sum(np.any(np.abs(detected - t) <= tol) for t in truth)
    false = sum(not np.any(np.abs(truth - d) <= tol) for d in detected)
    return hits / len(truth), false / max(len(detected), 1)


class TestRPeakDetection:
    """Tests for the QRS detector"""

    @staticmethod
    def _score(x, truth):
        detected = detect_r_peaks(x, FS)
        tol = int(0.05 * FS)

        def inner(idx):
            # drop the filter start-up second and beats cut by the record end
            return idx[(idx > FS) & (idx < x.size - FS)]

        sens, _ = _sensitivity(detected, inner(truth), tol)
        _, false_rate = _sensitivity(inner(detected), truth, tol)
        return sens, false_rate

    @pytest.mark.parametrize("state,seed", [(EcgState.REST, 1), (EcgState.EXERCISE, 2)])
    def test_detects_synthetic_beats(self, state, seed):
        """Test sensitivity and false-detection rate at +/-50 ms"""
        x, truth, _ = _conditioned(state, seed=seed)
        sens, false_rate = self._score(x, truth)

        assert sens >= 0.99
        assert false_rate <= 0.01

    @pytest.mark.parametrize("seed", range(6))
    def test_resting_rate_across_seeds(self, seed):
        """Test a 70 bpm rhythm is tracked beat for beat"""
        x, truth, _ = _conditioned(EcgState.REST, seed=seed)
        sens, false_rate = self._score(x, truth)

        assert sens >= 0.99
        assert false_rate <= 0.01

    @pytest.mark.parametrize("seed", range(6))
    def test_fast_rate_across_seeds(self, seed, monkeypatch):
        """Test a 150 bpm post-exercise rhythm with compressed waves"""
        monkeypatch.setitem(data_io.HR_BANDS, EcgState.EXERCISE, (148.0, 150.0))
        x, truth, _ = _conditioned(EcgState.EXERCISE, seed=seed)
        sens, false_rate = self._score(x, truth)

        assert np.median(np.diff(truth)) <= round(60.0 / 148.0 * FS)
        assert sens >= 0.99
        assert false_rate <= 0.01

    @pytest.mark.parametrize("state", [EcgState.REST, EcgState.EXERCISE])
    @pytest.mark.parametrize("morphology", range(4))
    def test_random_morphologies(self, state, morphology):
        """Test detection on drawn subject templates"""
        params = data_io.random_subject(morphology)
        x, truth, _ = _conditioned(state, seed=10 + morphology, params=params)
        sens, false_rate = self._score(x, truth)

        assert sens >= 0.99
        assert false_rate <= 0.01

    def test_detections_land_near_r(self):
        """Test matched detections sit within a few samples of the true R peak"""
        x, truth, _ = _conditioned(EcgState.REST, seed=7, noise=0.02)
        detected = detect_r_peaks(x, FS)
        truth = truth[(truth > FS) & (truth < x.size - FS)]
        offsets = [detected[np.argmin(np.abs(detected - t))] - t for t in truth]

        assert np.max(np.abs(offsets)) <= int(0.03 * FS)

    def test_peaks_strictly_increasing(self):
        """Test detections are ordered and respect the refractory gap"""
        x, _, _ = _conditioned(EcgState.EXERCISE, seed=3, duration=20.0)
        peaks = detect_r_peaks(x, FS)

        assert np.all(np.diff(peaks) >= round(0.2 * FS))

    def test_flat_signal_has_no_peaks(self):
        """Test an all-zero input"""
        assert detect_r_peaks(np.zeros(3000), FS).size == 0


class TestSegmentation:
    """Tests for R-anchored windowing"""

    def test_lengths_per_state(self):
        """Test 6 s windows at rest and 4 s after exercise at 300 Hz"""
        assert segment_length(EcgState.REST, FS) == 1800
        assert segment_length(EcgState.EXERCISE, FS) == 1200

    def test_r_index_at_quarter(self):
        """Test the R peak sits at 25% of every window"""
        x = np.random.default_rng(2).normal(size=6000)
        peaks = [500, 1500, 2500, 4000]
        segs = segment_around_peaks(x, peaks, EcgState.EXERCISE, FS, "s01")

        assert len(segs) == 4
        for seg, p in zip(segs, peaks):
            assert seg.length == 1200
            assert seg.r_index == 300
            assert np.array_equal(seg.samples, x[p - 300:p + 900])

    def test_boundary_windows_dropped(self):
        """Test windows crossing the signal edges are dropped"""
        x = np.zeros(3000)
        segs = segment_around_peaks(x, [100, 1000, 2500], EcgState.REST, FS, "s01")

        assert [s.r_index for s in segs] == [450]
        assert len(segs) == 1

    def test_rr_attached(self):
        """Test RR intervals come from the previous peak (next for the first)"""
        x = np.zeros(6000)
        segs = segment_around_peaks(x, [600, 840, 1110], EcgState.EXERCISE, FS, "s01")

        assert segs[0].rr_s == pytest.approx(240 / FS)
        assert segs[1].rr_s == pytest.approx(240 / FS)
        assert segs[2].rr_s == pytest.approx(270 / FS)


def _segment(samples, rr_s=0.8, extrema=None):
    return Segment(samples=samples, subject_id="s01", state=EcgState.REST, r_index=0, fs_hz=FS,
                   rr_s=rr_s, record_extrema=extrema)


class TestQualityGate:
    """Tests for segment quality rejection"""

    def _beat_like(self):
        x, truth, _ = _conditioned(EcgState.REST, seed=4, duration=10.0, noise=0.0)
        return x[truth[3] - 450:truth[3] + 1350]

    def test_clean_segment_passes(self):
        """Test a clean beat window passes every check"""
        passed, report = quality_gate([_segment(self._beat_like())])

        assert len(passed) == 1
        assert report.n_passed == 1

    def test_clipped_segment(self):
        """Test five samples pinned at the record maximum"""
        x = self._beat_like().copy()
        top = x.max()
        x[100:105] = top
        passed, report = quality_gate([_segment(x, extrema=(x.min(), top))])

        assert not passed
        assert report.rejections[RejectionReason.CLIPPED] == 1

    def test_low_snr_segment(self):
        """Test a slow sinusoid has no QRS-band power"""
        t = np.arange(1800) / FS
        passed, report = quality_gate([_segment(np.sin(2 * np.pi * 0.7 * t))])

        assert report.rejections[RejectionReason.LOW_SNR] == 1

    def test_bad_rhythm(self):
        """Test an RR of 0.2 s (300 bpm) is implausible"""
        passed, report = quality_gate([_segment(self._beat_like(), rr_s=0.2)])

        assert report.rejections[RejectionReason.BAD_RR] == 1

    def test_missing_rr_skips_rhythm_check(self):
        """Test segments without an RR interval are not judged on rhythm"""
        passed, _ = quality_gate([_segment(self._beat_like(), rr_s=None)])

        assert len(passed) == 1

    @pytest.mark.parametrize("seed", range(10))
    def test_random_segments_reconcile(self, seed):
        """Test the batch report accounts for every random segment exactly once"""
        rng = np.random.default_rng(seed)
        beat = self._beat_like()
        t = np.arange(beat.size) / FS
        segs = []
        for _ in range(int(rng.integers(1, 25))):
            kind = rng.integers(4)
            if kind == 0:
                samples = beat * rng.uniform(0.5, 2.0)
            elif kind == 1:
                samples = rng.normal(size=beat.size)
            elif kind == 2:
                samples = np.sin(2 * np.pi * rng.uniform(0.3, 2.0) * t)
            else:
                samples = np.clip(beat, None, np.quantile(beat, 0.99))
            rr = None if rng.random() < 0.3 else rng.uniform(0.1, 2.0)
            segs.append(_segment(samples, rr_s=rr))
        passed, report = quality_gate(segs)
        singles = [quality_gate([s])[1] for s in segs]

        assert report.n_input == len(segs)
        assert report.n_passed == len(passed)
        assert report.n_passed + sum(report.rejections.values()) == report.n_input
        assert report.rejections[RejectionReason.BOUNDARY_TRUNCATED] == 0
        positions = [next(i for i, s in enumerate(segs) if s is p) for p in passed]
        assert positions == sorted(set(positions))
        assert sum(r.n_passed for r in singles) == report.n_passed
        for reason in RejectionReason:
            assert sum(r.rejections[reason] for r in singles) == report.rejections[reason]

    def test_report_reconciles(self):
        """Test passed + rejected = input"""
        segs = [_segment(self._beat_like()), _segment(self._beat_like(), rr_s=0.1)]
        _, report = quality_gate(segs, QualityConfig())

        assert report.n_passed + sum(report.rejections.values()) == report.n_input == 2


class TestPreprocessRecord:
    """Tests for the record-level pipeline"""

    def test_segments_are_state_sized(self):
        """Test every emitted segment has the state's length and anchor"""
        record, _ = data_io.synth_ecg(SubjectParams(), EcgState.EXERCISE, 30.0, 0.05, seed=8)
        segments, report = preprocess_record(record)

        assert segments
        assert all(s.length == 1200 and s.r_index == 300 for s in segments)
        assert report.n_passed == len(segments)
        assert report.n_input == report.n_passed + sum(report.rejections.values())
        assert report.rejections[RejectionReason.BOUNDARY_TRUNCATED] >= 1

    def test_custom_window_lengths(self):
        """Test a shorter configured window at a lower sampling rate"""
        record, _ = data_io.synth_ecg(SubjectParams(), EcgState.REST, 30.0, 0.02, seed=2, fs_hz=100.0)
        config = PreprocessConfig(rest_segment_s=2.0, exercise_segment_s=1.5)
        segments, _ = preprocess_record(record, config)

        assert segments
        assert {s.length for s in segments} == {200}
        assert {s.r_index for s in segments} == {50}

    def test_constant_record_is_degenerate(self):
        """Test a flat record cannot be normalized"""
        record = EcgRecord("s01", EcgState.REST, FS, np.zeros(3000))
        with pytest.raises(DegenerateSignal):
            preprocess_record(record)
