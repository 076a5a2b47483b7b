"""Cross-entropy training with Adam and a reduce-on-plateau schedule."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import layers as L
from .model import ModelConfig, ModelParams, backward_batch, forward_batch, init_params, predict

log = logging.getLogger(__name__)


class Arrays(NamedTuple):
    windows: np.ndarray
    rr: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return int(self.labels.size)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr0: float = 2e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-5
    plateau_threshold: float = 1e-4
    seed: int = 0
    use_rr: bool = True
    use_denoising: bool = True
    noise_mode: str = "noiseless"
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def loss_and_grad(params: ModelParams, windows, rr, labels, fq=None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and the gradient of every tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    logits, cache = forward_batch(params, windows, rr, fq)
    loss, dlogits = L.cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    return loss, backward_batch(dlogits, cache, params.config)


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()},
                   {k: np.zeros_like(v) for k, v in params.tensors.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float
              ) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr:
            params.tensors[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(m.dtype)
    return params, state


# ------------------------------------------------------------------ schedule


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 10
    min_lr: float = 1e-5
    threshold: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, value: float) -> float:
        if value < self.best - self.threshold:
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def plateau_schedule(history: list[float], state: PlateauState) -> float:
    """Feed a validation-loss history through the schedule; returns the final lr."""
    for v in history:
        state.step(v)
    return state.lr


# ------------------------------------------------------------------ driver


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_loss: float = math.inf
    quant_scales: dict | None = None


def evaluate_loss(params: ModelParams, data: Arrays, batch_size: int = 2048) -> tuple[float, float]:
    """(mean cross-entropy, accuracy)."""
    if len(data) == 0:
        return math.nan, math.nan
    logits = predict(params, data.windows, data.rr if params.config.use_rr else None, batch_size)
    loss, _ = L.cross_entropy(logits, data.labels)
    return loss, float(np.mean(logits.argmax(1) == data.labels))


def _as_arrays(data) -> Arrays:
    w, r, y = data
    return Arrays(np.asarray(w), np.asarray(r), np.asarray(y, dtype=np.int64))


def train(config: TrainConfig, train_data, valid_data, model_config: ModelConfig | None = None,
          init: ModelParams | None = None, fq=None, log_path: str | Path | None = None) -> TrainResult:
    """Minibatch training; keeps the parameters with the lowest validation loss.

    With ``fq`` set, forward passes run through that fake-quantizer (its
    ``training`` flag is raised for the update passes and lowered for
    validation).
    """
    train_data, valid_data = _as_arrays(train_data), _as_arrays(valid_data)
    if len(train_data) == 0:
        raise ValueError("empty training set")
    dtype = np.dtype(config.dtype)
    if init is None:
        mc = model_config or ModelConfig(use_rr=config.use_rr)
        params = init_params(mc, config.seed, dtype)
    else:
        params = init.astype(dtype)
    mc = params.config
    win = train_data.windows.astype(dtype, copy=False)
    rr = train_data.rr.astype(dtype, copy=False) if mc.use_rr else None
    state = AdamState.zeros(params)
    sched = PlateauState(config.lr0, config.plateau_factor, config.plateau_patience,
                         config.min_lr, config.plateau_threshold)
    result = TrainResult(params.copy())
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(len(train_data))
            total, seen = 0.0, 0
            if fq is not None:
                fq.training = True
            for s in range(0, len(order), config.batch_size):
                idx = order[s : s + config.batch_size]
                loss, grads = loss_and_grad(params, win[idx], None if rr is None else rr[idx],
                                            train_data.labels[idx], fq)
                adam_step(params, grads, state, sched.lr)
                total += loss * idx.size
                seen += idx.size
            if fq is not None:
                fq.training = False
            if fq is None:
                vloss, vacc = evaluate_loss(params, valid_data)
            else:
                vloss, vacc = fq_evaluate_loss(params, valid_data, fq)
            lr = sched.lr
            entry = {"epoch": epoch, "train_loss": total / seen, "valid_loss": vloss,
                     "valid_acc": vacc, "lr": lr}
            result.log.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
                fh.flush()
            log.info("epoch %d train %.4f valid %.4f acc %.4f lr %.2e",
                     epoch, entry["train_loss"], vloss, vacc, lr)
            if not math.isfinite(entry["train_loss"]):
                raise FloatingPointError(f"training diverged at epoch {epoch}")
            score = vloss if math.isfinite(vloss) else entry["train_loss"]
            if score < result.best_valid_loss:
                result.best_valid_loss = score
                result.best_epoch = epoch
                result.params = params.copy()
                if fq is not None:
                    result.quant_scales = dict(fq.scales)
            sched.step(score)
    finally:
        if fh:
            fh.close()
    if config.epochs == 0:
        result.params = params.copy()
        if fq is not None:
            result.quant_scales = dict(fq.scales)
    return result


def fq_evaluate_loss(params: ModelParams, data: Arrays, fq, batch_size: int = 2048) -> tuple[float, float]:
    if len(data) == 0:
        return math.nan, math.nan
    outs = []
    for i in range(0, len(data), batch_size):
        r = data.rr[i:i + batch_size] if params.config.use_rr else None
        outs.append(forward_batch(params, data.windows[i:i + batch_size], r, fq)[0])
    logits = np.concatenate(outs)
    loss, _ = L.cross_entropy(logits, data.labels)
    return loss, float(np.mean(logits.argmax(1) == data.labels))


def cross_validate(config: TrainConfig, beatset, folds, model_config: ModelConfig | None = None,
                   test_condition=None, log_dir: str | Path | None = None):
    """Train one model per fold; returns (per-fold reports, aggregate)."""
    from .dataset import NoiseCondition, build_noise_program
    from .evaluation import aggregate_folds, evaluate_predictions

    reports = []
    cond = test_condition or NoiseCondition.NOISELESS
    for k, split in enumerate(folds):
        tr = beatset.gather(build_noise_program(split.train, config.noise_mode, config.seed))
        va = beatset.gather(build_noise_program(split.valid, config.noise_mode, config.seed))
        te = beatset.gather(split.test, cond)
        cfg_k = TrainConfig.from_dict({**config.to_dict(), "seed": config.seed + k})
        lp = Path(log_dir) / f"fold{k}.jsonl" if log_dir else None
        res = train(cfg_k, tr, va, model_config, log_path=lp)
        logits = predict(res.params, te[0], te[1] if res.params.config.use_rr else None)
        reports.append(evaluate_predictions(te[2], logits.argmax(1)))
    return reports, aggregate_folds(reports)
