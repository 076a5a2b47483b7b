"""Baseline removal, powerline low-pass and Pan-Tompkins R-peak detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal


@dataclass(frozen=True)
class FilterSpec:
    median_window_1_ms: float = 200.0
    median_window_2_ms: float = 600.0
    lowpass_cutoff_hz: float = 35.0
    lowpass_order: int = 4

    def __post_init__(self):
        if self.median_window_1_ms <= 0 or self.median_window_2_ms <= 0:
            raise ValueError("median windows must be positive")
        if self.lowpass_order < 1:
            raise ValueError("lowpass order must be positive")


def odd_window(fs: float, ms: float) -> int:
    """Samples in a ``ms`` window, bumped to the next odd integer."""
    n = int(round(fs * ms / 1000.0))
    return n + 1 if n % 2 == 0 else n


def median_filter(x: np.ndarray, window: int) -> np.ndarray:
    """Centered sliding median with edge replication."""
    if window <= 0 or window % 2 == 0:
        raise ValueError(f"median window must be odd and positive, got {window}")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    # explicit padding: ndimage mis-handles windows longer than the signal
    h = window // 2
    padded = np.pad(x, h, mode="edge")
    return ndimage.median_filter(padded, size=window, mode="nearest")[h : h + x.size]


def remove_baseline(x: np.ndarray, fs: float, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    if fs <= 0:
        raise ValueError("fs must be positive")
    x = np.asarray(x, dtype=np.float64)
    base = median_filter(x, odd_window(fs, spec.median_window_1_ms))
    base = median_filter(base, odd_window(fs, spec.median_window_2_ms))
    return x - base


def lowpass(x: np.ndarray, fs: float, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    """Zero-phase Butterworth low-pass."""
    if not 0 < spec.lowpass_cutoff_hz < fs / 2:
        raise ValueError(f"cutoff {spec.lowpass_cutoff_hz} Hz invalid for fs={fs}")
    sos = signal.butter(spec.lowpass_order, spec.lowpass_cutoff_hz, btype="low",
                        fs=fs, output="sos")
    return signal.sosfiltfilt(sos, np.asarray(x, dtype=np.float64))


def denoise(x: np.ndarray, fs: float, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    return lowpass(remove_baseline(x, fs, spec), fs, spec)


# --------------------------------------------------------------- Pan-Tompkins


@dataclass
class _Stages:
    bandpassed: np.ndarray
    integrated: np.ndarray


def _pt_stages(x: np.ndarray, fs: float) -> _Stages:
    sos = signal.butter(2, [5.0, 15.0], btype="band", fs=fs, output="sos")
    bp = signal.sosfiltfilt(sos, x)
    # five-point derivative, centered
    h = np.array([1.0, 2.0, 0.0, -2.0, -1.0]) * (fs / 8.0)
    der = np.convolve(bp, h, mode="same")
    sq = der * der
    n_int = max(1, int(round(0.150 * fs)))
    integ = np.convolve(sq, np.ones(n_int) / n_int, mode="same")
    return _Stages(bp, integ)


def pan_tompkins(x: np.ndarray, fs: float) -> np.ndarray:
    """R-peak sample indices.

    Integrated-signal peaks are classified against adaptive signal/noise
    levels (0.125 / 0.875 updates), with search-back at 1.66 times the
    running RR average and a 360 ms T-wave slope test. Each accepted peak
    is moved to the band-passed maximum within +-50 ms.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2 * fs:
        raise ValueError("signal too short: need at least 2 s for the learning phase")
    st = _pt_stages(x, fs)
    integ, bp = st.integrated, st.bandpassed
    if not np.any(integ > 0) or np.max(integ) <= 1e-12 * max(1.0, np.max(np.abs(x))):
        return np.zeros(0, dtype=np.int64)

    refractory = int(round(0.2 * fs))
    cand, _ = signal.find_peaks(integ, distance=refractory)
    if cand.size == 0:
        return np.zeros(0, dtype=np.int64)
    slope = np.abs(np.gradient(bp))
    half_qrs = int(round(0.075 * fs))

    learn = integ[: int(2 * fs)]
    spk = 0.25 * learn.max()
    npk = 0.5 * learn.mean()
    thr1 = npk + 0.25 * (spk - npk)

    qrs: list[int] = []
    qrs_slopes: list[float] = []
    rr_hist: list[int] = []
    noise_since: list[int] = []  # candidates rejected since the last QRS

    def accept(i: int, searchback: bool = False) -> None:
        nonlocal spk
        amp = integ[i]
        spk = (0.25 * amp + 0.75 * spk) if searchback else (0.125 * amp + 0.875 * spk)
        if qrs:
            rr_hist.append(i - qrs[-1])
            del rr_hist[:-8]
        qrs.append(i)
        lo, hi = max(0, i - half_qrs), min(len(x), i + half_qrs + 1)
        qrs_slopes.append(float(slope[lo:hi].max()))
        noise_since.clear()

    for i in cand:
        i = int(i)
        # search-back for a missed beat before handling this candidate
        if qrs and rr_hist:
            rr_avg = float(np.mean(rr_hist))
            if i - qrs[-1] > 1.66 * rr_avg and noise_since:
                thr2 = 0.5 * thr1
                best = max(noise_since, key=lambda j: integ[j])
                if integ[best] > thr2 and best - qrs[-1] > refractory:
                    accept(best, searchback=True)
                    thr1 = npk + 0.25 * (spk - npk)
        amp = integ[i]
        if amp > thr1:
            if qrs and i - qrs[-1] < refractory:
                continue
            if qrs and i - qrs[-1] < int(0.36 * fs):
                lo, hi = max(0, i - half_qrs), min(len(x), i + half_qrs + 1)
                if slope[lo:hi].max() < 0.5 * qrs_slopes[-1]:
                    npk = 0.125 * amp + 0.875 * npk
                    thr1 = npk + 0.25 * (spk - npk)
                    continue
            accept(i)
        else:
            npk = 0.125 * amp + 0.875 * npk
            noise_since.append(i)
        thr1 = npk + 0.25 * (spk - npk)

    w = int(round(0.05 * fs))
    out = []
    for i in qrs:
        lo, hi = max(0, i - w), min(len(bp), i + w + 1)
        out.append(lo + int(np.argmax(bp[lo:hi])))
    peaks = np.array(sorted(set(out)), dtype=np.int64)
    if peaks.size > 1:
        keep = [0]
        for k in range(1, len(peaks)):
            if peaks[k] - peaks[keep[-1]] >= refractory:
                keep.append(k)
        peaks = peaks[keep]
    return peaks


def match_peaks(reference: np.ndarray, detected: np.ndarray, tolerance: int) -> int:
    """Number of reference beats with a detection within ``tolerance`` samples."""
    reference = np.asarray(reference)
    detected = np.sort(np.asarray(detected))
    if reference.size == 0 or detected.size == 0:
        return 0
    pos = np.searchsorted(detected, reference)
    left = detected[np.clip(pos - 1, 0, len(detected) - 1)]
    right = detected[np.clip(pos, 0, len(detected) - 1)]
    dist = np.minimum(np.abs(reference - left), np.abs(reference - right))
    return int(np.sum(dist <= tolerance))
