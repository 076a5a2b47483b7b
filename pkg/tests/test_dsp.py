import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import signal as sps

from ecgformer.dataset import annotated_beats
from ecgformer.dsp import (
    FilterSpec,
    denoise,
    lowpass,
    match_peaks,
    median_filter,
    odd_window,
    pan_tompkins,
    remove_baseline,
)
from ecgformer.synthetic import synth_record

FS = 360.0


def brute_median(x, w):
    h = w // 2
    n = len(x)
    return np.array([np.median([x[min(max(j, 0), n - 1)] for j in range(i - h, i + h + 1)]) for i in range(n)])


def pulse_train(duration_s=20.0, bpm=60.0, fs=FS):
    n = int(duration_s * fs)
    t = np.arange(n)
    peaks = np.arange(int(0.5 * fs), n - int(0.5 * fs), int(round(60.0 / bpm * fs)))
    x = np.zeros(n)
    for p in peaks:
        x += np.exp(-0.5 * ((t - p) / (0.012 * fs)) ** 2)
    return x, peaks


# ------------------------------------------------------------ median filter


def test_window_lengths():
    assert odd_window(FS, 200) == 73
    assert odd_window(FS, 600) == 217


def test_median_examples():
    assert median_filter(np.full(9, 2.5), 5).tolist() == [2.5] * 9
    assert median_filter(np.array([1, 9, 1, 9, 1.0]), 3).tolist() == [1, 1, 9, 1, 1]
    mid = np.zeros(7)
    mid[3] = 1
    assert np.all(median_filter(mid, 3) == 0)
    edge = np.zeros(7)
    edge[0] = 1
    out = median_filter(edge, 3)
    assert np.array_equal(out, brute_median(edge, 3))
    assert out[0] == 1 and np.all(out[1:] == 0)


@pytest.mark.parametrize("w", [0, 2, -3])
def test_median_bad_window(w):
    with pytest.raises(ValueError):
        median_filter(np.zeros(5), w)


def test_median_empty():
    with pytest.raises(ValueError):
        median_filter(np.zeros(0), 3)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.sampled_from([1, 3, 5, 7, 11]))
def test_median_matches_brute_force(values, w):
    x = np.array(values)
    assert np.array_equal(median_filter(x, w), brute_median(x, w))


@given(st.floats(-10, 10), st.integers(1, 60), st.integers(1, 60), st.sampled_from([3, 5, 9]))
def test_median_idempotent_on_steps(c, n1, n2, w):
    x = np.concatenate([np.zeros(n1), np.full(n2, c)])
    once = median_filter(x, w)
    assert np.array_equal(median_filter(once, w), once)
    const = np.full(n1, c)
    assert np.array_equal(median_filter(median_filter(const, w), w), median_filter(const, w))


# -------------------------------------------------------------- baseline


def test_baseline_constant_and_zero():
    assert np.allclose(remove_baseline(np.full(1000, 3.3), FS), 0)
    assert np.all(remove_baseline(np.zeros(1000), FS) == 0)


def test_baseline_removes_ramp():
    t = np.arange(int(20 * FS)) / FS
    sine = np.sin(2 * np.pi * 1.0 * t)
    drift = 0.2 * t
    out = remove_baseline(sine + drift, FS)
    # project the output onto a line to measure what is left of the drift
    coef = np.polyfit(t, out, 1)
    residual = np.polyval(coef, t) - np.mean(np.polyval(coef, t))
    drift_c = drift - drift.mean()
    assert np.mean(residual**2) < 0.05 * np.mean(drift_c**2)


@given(st.floats(-50, 50))
def test_baseline_shift_equivariant(c):
    x = np.random.default_rng(3).standard_normal(800)
    assert np.allclose(remove_baseline(x + c, FS), remove_baseline(x, FS), atol=1e-9)


def test_baseline_bad_fs():
    with pytest.raises(ValueError):
        remove_baseline(np.zeros(10), 0)


# ---------------------------------------------------------------- lowpass


def _rms(x):
    return float(np.sqrt(np.mean(x**2)))


def test_lowpass_dc_gain():
    assert np.allclose(lowpass(np.full(2000, 1.7), FS), 1.7, atol=1e-6)


def test_lowpass_response():
    t = np.arange(int(10 * FS)) / FS
    mid = slice(720, -720)
    hum = np.sin(2 * np.pi * 60 * t)
    slow = np.sin(2 * np.pi * 5 * t)
    assert _rms(lowpass(hum, FS)[mid]) < 0.15 * _rms(hum[mid])
    assert abs(_rms(lowpass(slow, FS)[mid]) / _rms(slow[mid]) - 1) < 0.05
    # forward-backward gain is the squared magnitude response
    sos = sps.butter(4, 35, fs=FS, output="sos")
    _, h = sps.sosfreqz(sos, worN=[60.0, 5.0], fs=FS)
    assert abs(h[0]) ** 2 < 0.15 and abs(1 - abs(h[1]) ** 2) < 0.05


def test_lowpass_bad_cutoff():
    with pytest.raises(ValueError):
        lowpass(np.zeros(100), FS, FilterSpec(lowpass_cutoff_hz=200))


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_lowpass_linear(a, b):
    rng = np.random.default_rng(7)
    x, y = rng.standard_normal(600), rng.standard_normal(600)
    lhs = lowpass(a * x + b * y, FS)
    rhs = a * lowpass(x, FS) + b * lowpass(y, FS)
    assert np.allclose(lhs, rhs, rtol=1e-6, atol=1e-9)


def test_filter_spec_validation():
    with pytest.raises(ValueError):
        FilterSpec(median_window_1_ms=0)
    with pytest.raises(ValueError):
        FilterSpec(lowpass_order=0)


# ----------------------------------------------------------- Pan-Tompkins


def test_pan_tompkins_pulse_train():
    x, truth = pulse_train()
    peaks = pan_tompkins(x, FS)
    assert len(peaks) == len(truth)
    assert np.all(np.abs(peaks - truth) <= int(0.025 * FS))


def test_pan_tompkins_flat():
    assert pan_tompkins(np.zeros(int(5 * FS)), FS).size == 0


def test_pan_tompkins_too_short():
    with pytest.raises(ValueError, match="too short"):
        pan_tompkins(np.zeros(100), FS)


@pytest.mark.parametrize("seed", range(4))
def test_pan_tompkins_synthetic_records(seed):
    rec = synth_record("s", 60.0, seed=seed)
    x = denoise(rec.lead("MLII"), FS)
    peaks = pan_tompkins(x, FS)
    ref, _ = annotated_beats(rec)
    assert match_peaks(ref, peaks, int(0.15 * FS)) >= 0.99 * len(ref)
    assert np.all(np.diff(peaks) >= int(round(0.2 * FS)))


@given(st.integers(40, 150), st.integers(0, 10_000))
def test_pan_tompkins_spacing_property(bpm, seed):
    x, _ = pulse_train(12.0, bpm)
    x = x + 0.05 * np.random.default_rng(seed).standard_normal(x.size)
    peaks = pan_tompkins(x, FS)
    assert np.all(np.diff(peaks) >= int(round(0.2 * FS)))


def test_match_peaks():
    assert match_peaks(np.array([10, 100, 200]), np.array([12, 150]), 5) == 1
    assert match_peaks(np.array([10]), np.array([]), 5) == 0
