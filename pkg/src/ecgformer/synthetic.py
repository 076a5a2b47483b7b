"""Synthetic ECG records with class-dependent beat morphology.

Used for the checked-in fixture and for pipeline smoke runs when no
PhysioNet files are available. Beats are sums of Gaussian P/Q/R/S/T
waves; classes differ in prematurity, P-wave presence and QRS width.
"""

from __future__ import annotations

import numpy as np

from .signal_io import Annotation, ChannelSpec, EcgRecord, RecordHeader

# (amplitude mV, center s relative to R, width s) for P, Q, R, S, T
_MORPH = {
    "N": [(0.15, -0.20, 0.025), (-0.12, -0.03, 0.010), (1.20, 0.0, 0.012),
          (-0.25, 0.03, 0.010), (0.30, 0.28, 0.045)],
    "A": [(0.06, -0.14, 0.020), (-0.10, -0.03, 0.010), (1.10, 0.0, 0.012),
          (-0.22, 0.03, 0.010), (0.28, 0.26, 0.045)],
    "V": [(-0.30, -0.05, 0.030), (1.60, 0.0, 0.035), (-0.60, 0.08, 0.035),
          (-0.45, 0.34, 0.060)],
    "F": [(0.08, -0.18, 0.025), (-0.20, -0.03, 0.018), (1.40, 0.0, 0.022),
          (-0.45, 0.05, 0.022), (-0.10, 0.30, 0.055)],
    "Q": [(0.9, -0.02, 0.04), (-0.9, 0.06, 0.04), (0.4, 0.25, 0.08)],
}
_RR_FACTOR = {"N": 1.0, "A": 0.62, "V": 0.65, "F": 0.85, "Q": 1.0}
_COMPENSATORY = {"N": 1.0, "A": 1.15, "V": 1.45, "F": 1.1, "Q": 1.0}


def _beat(t: np.ndarray, sym: str, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros_like(t)
    jitter = 1.0 + 0.05 * rng.standard_normal()
    for amp, mu, sd in _MORPH[sym]:
        out += amp * jitter * np.exp(-0.5 * ((t - mu) / sd) ** 2)
    return out


def synth_ecg(duration_s: float, fs: float = 360.0, seed: int = 0,
              class_probs: dict[str, float] | None = None,
              heart_rate_bpm: float = 72.0, wander_mv: float = 0.3,
              noise_mv: float = 0.01) -> tuple[np.ndarray, list[Annotation]]:
    """One lead in mV plus beat annotations at the R peaks."""
    rng = np.random.default_rng(seed)
    probs = class_probs or {"N": 0.80, "A": 0.06, "V": 0.08, "F": 0.05, "Q": 0.01}
    syms, p = zip(*probs.items())
    p = np.asarray(p) / np.sum(p)
    n = int(duration_s * fs)
    x = np.zeros(n)
    base_rr = 60.0 / heart_rate_bpm
    anns: list[Annotation] = []
    t_r = 0.6
    prev = "N"
    while True:
        sym = str(rng.choice(syms, p=p)) if anns else "N"
        rr = base_rr * _RR_FACTOR[sym] * (1 + 0.04 * rng.standard_normal())
        if anns:
            t_r += rr
        if prev != "N":
            t_r += base_rr * (_COMPENSATORY[prev] - 1.0)
        idx = int(round(t_r * fs))
        if idx >= n - int(0.6 * fs):
            break
        lo, hi = max(0, idx - int(0.5 * fs)), min(n, idx + int(0.6 * fs))
        t = (np.arange(lo, hi) - idx) / fs
        x[lo:hi] += _beat(t, sym, rng)
        anns.append(Annotation(idx, sym))
        prev = sym
    tt = np.arange(n) / fs
    x += wander_mv * np.sin(2 * np.pi * 0.25 * tt + rng.uniform(0, 2 * np.pi))
    x += 0.5 * wander_mv * np.sin(2 * np.pi * 0.07 * tt + rng.uniform(0, 2 * np.pi))
    x += noise_mv * rng.standard_normal(n)
    x += 0.02 * np.sin(2 * np.pi * 60.0 * tt)
    return x, anns


def electrode_motion_noise(duration_s: float, fs: float = 360.0, seed: int = 0) -> np.ndarray:
    """Low-frequency bursts with sharp transients, in mV."""
    rng = np.random.default_rng(seed)
    n = int(duration_s * fs)
    walk = np.cumsum(rng.standard_normal(n)) * 0.01
    walk -= np.convolve(walk, np.ones(int(fs)) / int(fs), mode="same")
    bursts = np.zeros(n)
    for _ in range(int(duration_s / 2)):
        c = rng.integers(0, n)
        w = rng.uniform(0.03, 0.15) * fs
        t = np.arange(n) - c
        lo, hi = max(0, int(c - 4 * w)), min(n, int(c + 4 * w))
        bursts[lo:hi] += rng.uniform(-0.8, 0.8) * np.exp(-0.5 * (t[lo:hi] / w) ** 2)
    return walk + bursts + 0.02 * rng.standard_normal(n)


def synth_record(name: str, duration_s: float = 120.0, fs: float = 360.0, seed: int = 0,
                 **kwargs) -> EcgRecord:
    """Two-lead record (MLII, V1) in format-212 compatible ADC units."""
    mlii, anns = synth_ecg(duration_s, fs, seed, **kwargs)
    v1 = -0.5 * mlii + 0.02 * np.random.default_rng(seed + 1).standard_normal(mlii.size)
    gain, zero = 200.0, 1024
    adc = np.stack([np.round(mlii * gain), np.round(v1 * gain)]) + zero
    adc = np.clip(adc, -2048, 2047).astype(np.int16)
    specs = (ChannelSpec("212", gain, zero, "MLII", None, f"{name}.dat"),
             ChannelSpec("212", gain, zero, "V1", None, f"{name}.dat"))
    header = RecordHeader(name, 2, fs, adc.shape[1], specs)
    return EcgRecord(header, adc, anns)


def synth_noise_record(name: str = "em", duration_s: float = 120.0, fs: float = 360.0,
                       seed: int = 99) -> EcgRecord:
    n1 = electrode_motion_noise(duration_s, fs, seed)
    n2 = electrode_motion_noise(duration_s, fs, seed + 1)
    gain = 200.0
    adc = np.clip(np.round(np.stack([n1, n2]) * gain), -2048, 2047).astype(np.int16)
    specs = (ChannelSpec("212", gain, 0, "noise1", None, f"{name}.dat"),
             ChannelSpec("212", gain, 0, "noise2", None, f"{name}.dat"))
    return EcgRecord(RecordHeader(name, 2, fs, adc.shape[1], specs), adc, [])
