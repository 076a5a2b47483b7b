"""Beat segmentation, RR normalization, noise mixing and data splits."""

from __future__ import annotations

import enum
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .containers import read_container, write_container
from .signal_io import BeatClass, EcgRecord, map_symbol_to_class

logger = logging.getLogger(__name__)

WINDOW = 198
PRE_R = 99  # samples before R; R itself plus 98 after completes the window
POST_R = WINDOW - PRE_R - 1
RR_MIN_S, RR_MAX_S = 0.2, 2.0


class NoiseCondition(str, enum.Enum):
    NOISELESS = "noiseless"
    SNR24 = "snr24"
    SNR10 = "snr10"
    SNR3 = "snr3"

    @property
    def snr_db(self) -> float | None:
        return {"noiseless": None, "snr24": 24.0, "snr10": 10.0, "snr3": 3.0}[self.value]

    @classmethod
    def from_token(cls, token: str | int | float) -> "NoiseCondition":
        t = str(token).lower().replace("db", "")
        if t in ("none", "noiseless", "clean"):
            return cls.NOISELESS
        if t.startswith("snr"):
            t = t[3:]
        return cls(f"snr{int(float(t))}")


ALL_CONDITIONS = tuple(NoiseCondition)


@dataclass(frozen=True)
class BeatSample:
    window: np.ndarray
    rr_norm: np.ndarray
    label: BeatClass
    source: tuple[str, int]
    noise_condition: NoiseCondition = NoiseCondition.NOISELESS

    def __post_init__(self):
        if self.window.shape != (WINDOW,):
            raise ValueError(f"window must have {WINDOW} samples")
        if self.rr_norm.shape != (2,) or np.any(np.abs(self.rr_norm) > 2.0):
            raise ValueError("rr_norm must be two values in [-2, 2]")


def normalize_rr(pre_rr_s: float | np.ndarray, post_rr_s: float | np.ndarray) -> np.ndarray:
    """Clamp RR intervals to [0.2, 2.0] s and map affinely onto [-2, 2]."""
    rr = np.stack([np.asarray(pre_rr_s, dtype=np.float64), np.asarray(post_rr_s, dtype=np.float64)], -1)
    if np.any(rr <= 0):
        raise ValueError("RR intervals must be positive")
    rr = np.clip(rr, RR_MIN_S, RR_MAX_S)
    return 4.0 * (rr - RR_MIN_S) / (RR_MAX_S - RR_MIN_S) - 2.0


def segment_arrays(x: np.ndarray, peaks: np.ndarray, fs: float
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Windows, normalized RR pairs and the kept positions into ``peaks``.

    Beats missing a neighbour or whose window leaves the signal are dropped.
    """
    peaks = np.asarray(peaks, dtype=np.int64)
    if peaks.size < 3:
        return np.zeros((0, WINDOW)), np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    k = np.arange(1, peaks.size - 1)
    r = peaks[k]
    ok = (r - PRE_R >= 0) & (r + POST_R < len(x))
    k, r = k[ok], r[ok]
    pre = (r - peaks[k - 1]) / fs
    post = (peaks[k + 1] - r) / fs
    ok = (pre > 0) & (post > 0)
    k, r, pre, post = k[ok], r[ok], pre[ok], post[ok]
    idx = r[:, None] + np.arange(-PRE_R, POST_R + 1)[None, :]
    return x[idx], normalize_rr(pre, post), k


def segment_beats(signal: np.ndarray, peak_indices: np.ndarray, labels, fs: float = 360.0,
                  record_name: str = "", condition: NoiseCondition = NoiseCondition.NOISELESS
                  ) -> tuple[list[BeatSample], int]:
    """Cut one sample per labelled peak; returns the samples and the skip count."""
    windows, rr, kept = segment_arrays(np.asarray(signal, dtype=np.float64), peak_indices, fs)
    peaks = np.asarray(peak_indices)
    out = [
        BeatSample(windows[j], rr[j], BeatClass(int(labels[k])), (record_name, int(peaks[k])), condition)
        for j, k in enumerate(kept)
    ]
    return out, len(peaks) - len(out)


# ------------------------------------------------------------------ noise


def noise_power_scale(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    ps = float(np.mean(np.abs(signal) ** 2))
    pn = float(np.mean(np.abs(noise) ** 2))
    if ps == 0 or pn == 0:
        raise ValueError("signal and noise must have non-zero power")
    return float(np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0))))


def tile_noise(noise: np.ndarray, n: int, offset: int) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size == 0 or not np.all(np.isfinite(noise)):
        raise ValueError("noise must be non-empty and finite")
    idx = (offset + np.arange(n)) % noise.size
    return noise[idx]


def mix_noise(signal: np.ndarray, noise: np.ndarray, snr_db: float,
              rng: np.random.Generator | None = None, offset: int | None = None
              ) -> tuple[np.ndarray, float]:
    """``signal + alpha * noise`` at the requested SNR; returns (Y, alpha)."""
    signal = np.asarray(signal, dtype=np.float64)
    if offset is None:
        offset = int(rng.integers(0, len(noise))) if rng is not None else 0
    seg = tile_noise(noise, signal.size, offset)
    if np.isinf(snr_db):
        return signal.copy(), 0.0
    alpha = noise_power_scale(signal, seg, snr_db)
    return signal + alpha * seg, alpha


def achieved_snr_db(signal: np.ndarray, scaled_noise: np.ndarray) -> float:
    return float(10.0 * np.log10(np.mean(np.abs(signal) ** 2) / np.mean(np.abs(scaled_noise) ** 2)))


def record_rng(seed: int, record_name: str, condition: NoiseCondition) -> np.random.Generator:
    key = zlib.crc32(record_name.encode())
    return np.random.default_rng([seed, key, ALL_CONDITIONS.index(condition)])


# ----------------------------------------------------------------- beat sets


@dataclass
class BeatSet:
    """Labelled beats; each noise condition keeps its own preprocessed windows."""

    windows: dict[NoiseCondition, np.ndarray]
    rr: np.ndarray
    labels: np.ndarray
    records: np.ndarray
    samples: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def conditions(self) -> tuple[NoiseCondition, ...]:
        return tuple(c for c in ALL_CONDITIONS if c in self.windows)

    def sample(self, i: int, condition: NoiseCondition = NoiseCondition.NOISELESS) -> BeatSample:
        return BeatSample(self.windows[condition][i].astype(np.float64), self.rr[i].astype(np.float64),
                          BeatClass(int(self.labels[i])), (str(self.records[i]), int(self.samples[i])),
                          condition)

    def gather(self, program: list[tuple[int, NoiseCondition]] | np.ndarray,
               condition: NoiseCondition | None = None
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(windows, rr, labels) arrays for a program of (index, condition).

        A plain index array selects the noiseless windows unless
        ``condition`` names another one.
        """
        if isinstance(program, np.ndarray) and condition is None:
            condition = NoiseCondition.NOISELESS
        if condition is not None:
            idx = np.asarray(program, dtype=np.int64)
            return self.windows[condition][idx], self.rr[idx], self.labels[idx]
        idx = np.array([i for i, _ in program], dtype=np.int64)
        conds = [c for _, c in program]
        w = np.empty((len(program), WINDOW), dtype=np.float32)
        for c in set(conds):
            m = np.array([cc == c for cc in conds])
            w[m] = self.windows[c][idx[m]]
        return w, self.rr[idx], self.labels[idx]

    def class_counts(self) -> dict[str, int]:
        return {c.name: int(np.sum(self.labels == c)) for c in BeatClass}

    def save(self, path: str | Path) -> None:
        tensors = {f"windows/{c.value}": w.astype("<f4") for c, w in self.windows.items()}
        tensors["rr"] = self.rr.astype("<f4")
        tensors["labels"] = self.labels.astype("<i1")
        tensors["samples"] = self.samples.astype("<i8")
        meta = dict(self.meta, kind="beats", window=WINDOW,
                    records=[str(r) for r in self.records],
                    class_order=[c.name for c in BeatClass])
        write_container(path, meta, tensors)

    @classmethod
    def load(cls, path: str | Path) -> "BeatSet":
        meta, t = read_container(path)
        if meta.get("kind") != "beats":
            raise ValueError(f"{path} is not a beat dataset")
        windows = {NoiseCondition(k.split("/", 1)[1]): v for k, v in t.items() if k.startswith("windows/")}
        records = np.array(meta.pop("records"))
        return cls(windows, t["rr"], t["labels"].astype(np.int64), records, t["samples"], meta)


def annotated_beats(record: EcgRecord) -> tuple[np.ndarray, np.ndarray]:
    idx, lab = [], []
    for a in record.annotations:
        c = map_symbol_to_class(a.symbol)
        if c is not None:
            idx.append(a.sample_index)
            lab.append(int(c))
    return np.array(idx, dtype=np.int64), np.array(lab, dtype=np.int64)


def build_beatset(records: list[EcgRecord], conditions=(NoiseCondition.NOISELESS,),
                  noise: np.ndarray | None = None, seed: int = 0, denoise: bool = True,
                  lead: str = "MLII", spec: dsp.FilterSpec = dsp.FilterSpec()) -> BeatSet:
    """Noise is added to the raw lead, then the lead is denoised and segmented."""
    conditions = tuple(NoiseCondition(c) for c in conditions)
    if any(c.snr_db is not None for c in conditions) and noise is None:
        raise ValueError("noisy conditions need a noise source")
    windows = {c: [] for c in conditions}
    rr, labels, names, samples = [], [], [], []
    skipped = 0
    for rec in records:
        x = rec.lead(lead)
        if x is None:
            logger.warning("record %s has no %s lead; skipped", rec.name, lead)
            continue
        peaks, lab = annotated_beats(rec)
        kept = None
        for c in conditions:
            y = x
            if c.snr_db is not None:
                y, _ = mix_noise(x, noise, c.snr_db, rng=record_rng(seed, rec.name, c))
            if denoise:
                y = dsp.denoise(y, rec.fs, spec)
            w, r, k = segment_arrays(y, peaks, rec.fs)
            windows[c].append(w.astype(np.float32))
            if kept is None:
                kept = k
                rr.append(r.astype(np.float32))
        skipped += len(peaks) - len(kept)
        labels.append(lab[kept])
        names.extend([rec.name] * len(kept))
        samples.append(peaks[kept])
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)  # noqa: E731
    return BeatSet(
        {c: cat(v, (0, WINDOW)).astype(np.float32) for c, v in windows.items()},
        cat(rr, (0, 2)).astype(np.float32),
        cat(labels, (0,)).astype(np.int64),
        np.array(names),
        cat(samples, (0,)).astype(np.int64),
        {"seed": seed, "denoise": denoise, "skipped": skipped,
         "conditions": [c.value for c in conditions]},
    )


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[int, int, int] = (7, 1, 2)
    seed: int = 0
    n_folds: int = 5

    def __post_init__(self):
        if sum(self.ratios) != 10:
            raise ValueError("split ratios must sum to 10")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train", "valid", "test")}

    @classmethod
    def from_json(cls, d: dict) -> "Split":
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in ("train", "valid", "test")))


def _perm(n: int, seed: int) -> np.ndarray:
    if n <= 0:
        raise ValueError("cannot split an empty dataset")
    return np.random.default_rng(seed).permutation(n)


def make_split(n: int, spec: SplitSpec = SplitSpec()) -> Split:
    """Seeded shuffle, then a contiguous train/valid/test cut."""
    perm = _perm(n, spec.seed)
    n_test = n * spec.ratios[2] // 10
    n_valid = n * spec.ratios[1] // 10
    n_train = n - n_test - n_valid
    return Split(perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :])


def make_folds(n: int, spec: SplitSpec = SplitSpec()) -> list[Split]:
    """Disjoint test folds over one shuffle; each remainder re-cut train:valid."""
    perm = _perm(n, spec.seed)
    tr, va = spec.ratios[0], spec.ratios[1]
    folds = []
    for test in np.array_split(perm, spec.n_folds):
        rest = perm[~np.isin(perm, test)]
        n_valid = len(rest) * va // (tr + va)
        folds.append(Split(rest[: len(rest) - n_valid], rest[len(rest) - n_valid :], test))
    return folds


def make_splits(n: int, spec: SplitSpec = SplitSpec()) -> tuple[Split, list[Split]]:
    return make_split(n, spec), make_folds(n, spec)


NOISE_MODES = ("noiseless", "snr24", "snr10", "snr3", "balanced-mix-train", "balanced-mix-test")


def build_noise_program(indices: np.ndarray, mode: str, seed: int = 0
                        ) -> list[tuple[int, NoiseCondition]]:
    """Assign noise conditions to beat indices.

    A single level tags every beat with it; ``balanced-mix-train`` deals the
    beats into four equal seeded parts; ``balanced-mix-test`` replicates
    every beat under all four conditions.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if mode == "balanced-mix-test":
        return [(int(i), c) for c in ALL_CONDITIONS for i in indices]
    if mode == "balanced-mix-train":
        perm = np.random.default_rng(seed).permutation(indices.size)
        parts = np.array_split(indices[perm], len(ALL_CONDITIONS))
        return [(int(i), c) for c, part in zip(ALL_CONDITIONS, parts) for i in part]
    try:
        cond = NoiseCondition.from_token(mode)
    except ValueError as exc:
        raise ValueError(f"unknown noise mode {mode!r}") from exc
    return [(int(i), cond) for i in indices]
