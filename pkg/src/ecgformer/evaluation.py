"""Confusion matrices, per-class metrics, fold aggregation and noise sweeps."""

from __future__ import annotations

import csv
import json
import math
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .signal_io import CLASS_NAMES

N_CLASSES = len(CLASS_NAMES)
SWEEP_CONDITIONS = ("noiseless", "snr24", "snr10", "snr3", "mix")


def confusion(preds, labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """counts[true, predicted]."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if preds.size and (min(preds.min(), labels.min()) < 0
                       or max(preds.max(), labels.max()) >= n_classes):
        raise ValueError("class index out of range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def sensitivity(cm: np.ndarray, cls: int) -> float | None:
    """Diagonal over row sum; None when the class never occurs."""
    return _ratio(int(cm[cls, cls]), int(cm[cls].sum()))


def precision(cm: np.ndarray, cls: int) -> float | None:
    """Diagonal over column sum; None when the class is never predicted."""
    return _ratio(int(cm[cls, cls]), int(cm[:, cls].sum()))


def accuracy(cm: np.ndarray) -> float | None:
    return _ratio(int(np.trace(cm)), int(cm.sum()))


@dataclass
class ClassReport:
    confusion: np.ndarray
    sensitivity: dict[str, float | None]
    precision: dict[str, float | None]
    accuracy: float | None

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "ClassReport":
        cm = np.asarray(cm, dtype=np.int64)
        names = CLASS_NAMES[: cm.shape[0]]
        return cls(cm,
                   {n: sensitivity(cm, i) for i, n in enumerate(names)},
                   {n: precision(cm, i) for i, n in enumerate(names)},
                   accuracy(cm))

    def to_json(self) -> dict:
        return {"confusion": self.confusion.tolist(), "class_order": list(CLASS_NAMES),
                "sensitivity": self.sensitivity, "precision": self.precision,
                "accuracy": self.accuracy, "n": int(self.confusion.sum())}


def evaluate_predictions(labels, preds) -> ClassReport:
    return ClassReport.from_confusion(confusion(preds, labels))


def report_is_consistent(report: dict) -> bool:
    """True when every scalar in a serialized report recomputes from its matrix."""
    fresh = ClassReport.from_confusion(np.asarray(report["confusion"])).to_json()
    return all(fresh[k] == report[k] for k in ("sensitivity", "precision", "accuracy"))


def _mean_std(values: list[float | None]) -> tuple[float | None, float | None]:
    v = [x for x in values if x is not None]
    if not v:
        return None, None
    mean = float(np.mean(v))
    std = float(np.std(v, ddof=1)) if len(v) > 1 else None
    return mean, std


def aggregate_folds(reports: list[ClassReport]) -> dict:
    """Per-fold metric means and sample standard deviations, plus the summed matrix.

    Folds where a metric is undefined are left out of that metric's mean.
    """
    if not reports:
        raise ValueError("no fold reports")
    out = {"folds": len(reports), "std": "sample (n-1)"}
    out["accuracy"] = dict(zip(("mean", "std"), _mean_std([r.accuracy for r in reports])))
    for key in ("sensitivity", "precision"):
        out[key] = {n: dict(zip(("mean", "std"), _mean_std([getattr(r, key)[n] for r in reports])))
                    for n in reports[0].sensitivity}
    pooled = sum((r.confusion for r in reports), np.zeros_like(reports[0].confusion))
    out["pooled"] = ClassReport.from_confusion(pooled).to_json()
    return out


def git_describe(cwd: str | Path | None = None) -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=cwd or Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_report(path: str | Path, body: dict, config_hash: str, seed: int) -> dict:
    doc = {**body, "config_hash": config_hash, "seed": seed, "code_version": git_describe()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc


def noise_sweep(predict_fn: Callable[[np.ndarray, np.ndarray], np.ndarray], beatset,
                test_indices, seed: int = 0, conditions=SWEEP_CONDITIONS) -> list[dict]:
    """Accuracy of one model on each test noise condition.

    ``predict_fn(windows, rr)`` returns predicted class indices.  The
    ``mix`` condition replicates every test beat under all four levels.
    """
    from .dataset import NoiseCondition, build_noise_program

    rows = []
    for cond in conditions:
        if cond == "mix":
            w, r, y = beatset.gather(build_noise_program(test_indices, "balanced-mix-test", seed))
        else:
            w, r, y = beatset.gather(np.asarray(test_indices), NoiseCondition.from_token(cond))
        rep = evaluate_predictions(y, predict_fn(w, r))
        rows.append({"condition": cond, "n": int(y.size), "accuracy": rep.accuracy,
                     **{f"sens_{k}": v for k, v in rep.sensitivity.items()}})
    return rows


def write_sweep_csv(path: str | Path, rows: list[dict], train_condition: str, config_hash: str) -> None:
    fields = ["train_condition", "test_condition", "n", "accuracy"] + \
        [f"sens_{n}" for n in CLASS_NAMES] + ["config_hash"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({"train_condition": train_condition, "test_condition": row["condition"],
                        "n": row["n"], "accuracy": _fmt(row["accuracy"]),
                        **{f"sens_{n}": _fmt(row.get(f"sens_{n}")) for n in CLASS_NAMES},
                        "config_hash": config_hash})


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(v)
