"""Command-line entry point: ``ecgformer <command> [options]``.

Every artifact carries the config hash and seed.  On failure the process
exits nonzero after printing one JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dsp
from .config import ConfigError, ExperimentConfig, load_config
from .dataset import (ALL_CONDITIONS, BeatSet, NoiseCondition, Split, build_beatset,
                      build_noise_program, make_folds, make_split)
from .evaluation import (ClassReport, evaluate_predictions, noise_sweep,
                         write_report, write_sweep_csv)
from .model import ModelParams, count_ops_and_memory, count_params, predict
from .quant.qmodel import QuantizedModel, calibrate, int_predict, qat_finetune
from .signal_io import PACED_RECORDS, class_counts, load_directory, load_record, write_record_csv
from .training import TrainConfig, cross_validate, train

log = logging.getLogger("ecgformer")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _record(path: str | None) -> Path:
    """A record given as .hea/.csv file or as a WFDB base name."""
    if path and not Path(path).exists() and Path(path + ".hea").exists():
        return Path(path)
    return _need(path, "record")


def _stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed}


def _write_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def _records(args, cfg: ExperimentConfig):
    directory = _need(args.records or cfg.paths.get("records"), "records directory")
    exclude = tuple(PACED_RECORDS) + tuple(cfg.exclude_records) + tuple(args.exclude_records or ())
    recs = load_directory(directory, exclude=exclude)
    if not recs:
        raise ValueError(f"no usable records in {directory}")
    return recs


def _noise(args, cfg: ExperimentConfig) -> np.ndarray:
    rec = load_record(_record(args.noise or cfg.paths.get("noise")))
    return rec.physical(0)


def _split(args, n: int, cfg: ExperimentConfig) -> Split:
    if getattr(args, "split", None):
        doc = json.loads(_need(args.split, "split file").read_text())
        fold = getattr(args, "fold", None)
        return Split.from_json(doc["single"] if fold is None else doc["folds"][fold])
    fold = getattr(args, "fold", None)
    return make_split(n, cfg.split) if fold is None else make_folds(n, cfg.split)[fold]


# ---------------------------------------------------------------- commands


def cmd_count(args, cfg):
    mops, footprint = count_ops_and_memory(cfg.model)
    doc = {"params": count_params(cfg.model), "mops": round(mops, 6),
           "footprint_bytes": footprint, **_stamp(cfg)}
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    else:
        print(f"params={doc['params']}")
        print(f"mops={mops:.3f}")
        print(f"footprint_bytes={footprint} ({footprint / 1000:.1f} kB)")
        print(f"config_hash={cfg.hash}")
    return 0


def cmd_ingest(args, cfg):
    recs = _records(args, cfg)
    doc = {"records": {r.name: class_counts([r]) for r in recs},
           "totals": class_counts(recs), "excluded": sorted(PACED_RECORDS), **_stamp(cfg)}
    _write_json(args.out, doc)
    return 0


def cmd_export_csv(args, cfg):
    if args.record:
        recs = [load_record(_record(args.record))]
    else:
        recs = load_directory(_need(args.records, "records directory"), exclude=())
    for r in recs:
        write_record_csv(r, args.out)
    return 0


def cmd_denoise(args, cfg):
    rec = load_record(_record(args.record))
    x = rec.lead(args.lead)
    if x is None:
        raise ValueError(f"record {rec.name} has no {args.lead} lead")
    y = dsp.denoise(x, rec.fs, cfg.filters)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "raw_mv", "denoised_mv"])
        for i, (a, b) in enumerate(zip(x, y)):
            w.writerow([i, repr(float(a)), repr(float(b))])
    return 0


def cmd_detect(args, cfg):
    from .dataset import annotated_beats

    rec = load_record(_record(args.record))
    x = rec.lead(args.lead)
    if x is None:
        raise ValueError(f"record {rec.name} has no {args.lead} lead")
    peaks = dsp.pan_tompkins(x, rec.fs)
    ref, _ = annotated_beats(rec)
    tol = int(round(args.tolerance_ms * rec.fs / 1000))
    hit = dsp.match_peaks(ref, peaks, tol)
    doc = {"record": rec.name, "peaks": peaks.tolist(), "annotated": int(ref.size), "matched": hit,
           "sensitivity": hit / ref.size if ref.size else None, "tolerance_samples": tol,
           **_stamp(cfg)}
    _write_json(args.out, doc)
    return 0


def _save_beatset(bs: BeatSet, path, cfg):
    bs.meta.update(_stamp(cfg))
    bs.save(path)


def cmd_segment(args, cfg):
    denoise = cfg.train.use_denoising and not args.no_denoise
    bs = build_beatset(_records(args, cfg), (NoiseCondition.NOISELESS,), None, cfg.seed,
                       denoise, spec=cfg.filters)
    _save_beatset(bs, args.out, cfg)
    log.info("segmented %d beats: %s", len(bs), bs.class_counts())
    return 0


def cmd_augment(args, cfg):
    denoise = cfg.train.use_denoising and not args.no_denoise
    bs = build_beatset(_records(args, cfg), ALL_CONDITIONS, _noise(args, cfg), cfg.seed,
                       denoise, spec=cfg.filters)
    _save_beatset(bs, args.out, cfg)
    return 0


def cmd_split(args, cfg):
    bs = BeatSet.load(_need(args.data, "dataset"))
    doc = {"n": len(bs), "single": make_split(len(bs), cfg.split).to_json(),
           "folds": [f.to_json() for f in make_folds(len(bs), cfg.split)],
           "ratios": list(cfg.split.ratios), **_stamp(cfg)}
    _write_json(args.out, doc)
    return 0


def _train_config(args, cfg) -> TrainConfig:
    tc = cfg.train
    if getattr(args, "epochs", None) is not None:
        tc = TrainConfig.from_dict({**tc.to_dict(), "epochs": args.epochs})
    return tc


def cmd_train(args, cfg):
    bs = BeatSet.load(_need(args.data, "dataset"))
    sp = _split(args, len(bs), cfg)
    tc = _train_config(args, cfg)
    tr = bs.gather(build_noise_program(sp.train, tc.noise_mode, cfg.seed))
    va = bs.gather(build_noise_program(sp.valid, tc.noise_mode, cfg.seed))
    res = train(tc, tr, va, cfg.model, log_path=args.log)
    res.params.save(args.out, {**_stamp(cfg), "best_epoch": res.best_epoch,
                               "train_config": tc.to_dict()})
    return 0


def cmd_cv(args, cfg):
    bs = BeatSet.load(_need(args.data, "dataset"))
    if args.split:
        doc = json.loads(_need(args.split, "split file").read_text())
        folds = [Split.from_json(f) for f in doc["folds"]][: args.folds]
    else:
        folds = make_folds(len(bs), cfg.split)[: args.folds]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports, agg = cross_validate(_train_config(args, cfg), bs, folds, cfg.model, log_dir=out)
    body = {"folds": [r.to_json() for r in reports], "aggregate": agg}
    write_report(out / "cv_report.json", body, cfg.hash, cfg.seed)
    return 0


def cmd_quantize(args, cfg):
    params, _ = ModelParams.load(_need(args.ckpt, "checkpoint"))
    bs = BeatSet.load(_need(args.data, "dataset"))
    sp = _split(args, len(bs), cfg)
    tc = _train_config(args, cfg)
    tr = bs.gather(build_noise_program(sp.train, tc.noise_mode, cfg.seed))
    va = bs.gather(build_noise_program(sp.valid, tc.noise_mode, cfg.seed))
    bsz = 512
    scales = calibrate(params, [(tr[0][i:i + bsz], tr[1][i:i + bsz])
                                for i in range(0, len(tr[2]), bsz)])
    qm, res = qat_finetune(params, scales, tr, va, tc, epochs=args.qat_epochs, log_path=args.log)
    qm.save(args.out, {**_stamp(cfg), "qat_epochs": args.qat_epochs, "best_epoch": res.best_epoch})
    return 0


def _predictor(args):
    if args.int8:
        qm, meta = QuantizedModel.load(_need(args.ckpt, "quantized checkpoint"))
        use_rr = qm.config.use_rr
        return (lambda w, r: int_predict(qm, w, r if use_rr else None)), meta
    params, meta = ModelParams.load(_need(args.ckpt, "checkpoint"))
    use_rr = params.config.use_rr
    return (lambda w, r: predict(params, w, r if use_rr else None)), meta


def _test_indices(args, bs, cfg):
    if args.split or args.fold is not None:
        return _split(args, len(bs), cfg).test
    return np.arange(len(bs))


def cmd_eval(args, cfg):
    bs = BeatSet.load(_need(args.data, "dataset"))
    logits_fn, meta = _predictor(args)
    idx = _test_indices(args, bs, cfg)
    if args.noise == "mix":
        w, r, y = bs.gather(build_noise_program(idx, "balanced-mix-test", cfg.seed))
    else:
        w, r, y = bs.gather(idx, NoiseCondition.from_token(args.noise))
    logits = logits_fn(w, r)
    rep: ClassReport = evaluate_predictions(y, logits.argmax(1))
    body = {**rep.to_json(), "int8": bool(args.int8), "noise": args.noise,
            "checkpoint_config_hash": meta.get("config_hash")}
    write_report(args.report, body, cfg.hash, cfg.seed)
    if args.logits_out:
        np.savetxt(args.logits_out, logits, fmt="%d" if args.int8 else "%.9g", delimiter=",")
    print(f"accuracy={rep.accuracy}")
    return 0


def cmd_sweep(args, cfg):
    bs = BeatSet.load(_need(args.data, "dataset"))
    logits_fn, _ = _predictor(args)
    idx = _test_indices(args, bs, cfg)
    rows = noise_sweep(lambda w, r: logits_fn(w, r).argmax(1), bs, idx, cfg.seed)
    write_sweep_csv(args.out, rows, args.train_condition or cfg.noise_mode, cfg.hash)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 gives bit-exact reruns")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ecgformer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    def recs(sp):
        sp.add_argument("--records", help="directory of WFDB or CSV records")
        sp.add_argument("--exclude-records", nargs="*", help="extra record names to leave out")

    def data_split(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--split", help="split JSON from the split command")
        sp.add_argument("--fold", type=int, help="use this cross-validation fold")

    sp = add("count", cmd_count, "parameter, operation and memory estimates")
    sp.add_argument("--json", action="store_true")

    sp = add("ingest", cmd_ingest, "parse records and report class totals")
    recs(sp)
    sp.add_argument("--out", required=True)

    sp = add("export-csv", cmd_export_csv, "convert records to CSV")
    sp.add_argument("--record")
    sp.add_argument("--records")
    sp.add_argument("--out", required=True, help="output directory")

    for name, fn, help_ in (("denoise", cmd_denoise, "baseline removal and low-pass"),
                            ("detect", cmd_detect, "R-peak detection")):
        sp = add(name, fn, help_)
        sp.add_argument("--record", required=True)
        sp.add_argument("--lead", default="MLII")
        sp.add_argument("--out", required=True)
        if name == "detect":
            sp.add_argument("--tolerance-ms", type=float, default=150.0)

    sp = add("segment", cmd_segment, "cut beat windows into a dataset file")
    recs(sp)
    sp.add_argument("--no-denoise", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("augment", cmd_augment, "dataset with all noise conditions")
    recs(sp)
    sp.add_argument("--noise", help="noise record (first channel is used)")
    sp.add_argument("--no-denoise", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("split", cmd_split, "single split and cross-validation folds")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a float model")
    data_split(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--log", help="JSON-lines training log")
    sp.add_argument("--out", required=True)

    sp = add("cv", cmd_cv, "k-fold cross-validation")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split")
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out-dir", required=True)

    sp = add("quantize", cmd_quantize, "calibrate, fine-tune and export an int8 model")
    data_split(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--qat-epochs", type=int, default=15)
    sp.add_argument("--log")
    sp.add_argument("--out", required=True)

    for name, fn, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                            ("sweep", cmd_sweep, "accuracy over test noise levels")):
        sp = add(name, fn, help_)
        data_split(sp)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--int8", action="store_true", help="checkpoint is a quantized model")
        if name == "eval":
            sp.add_argument("--noise", default="none", choices=["none", "24", "10", "3", "mix"])
            sp.add_argument("--report", required=True)
            sp.add_argument("--logits-out")
        else:
            sp.add_argument("--train-condition")
            sp.add_argument("--out", required=True)
    return p


def _error(command: str | None, exc: BaseException, code: int) -> int:
    rec = {"error": type(exc).__name__, "message": str(exc), "command": command, "exit_code": code}
    print(json.dumps(rec), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _error(None, UsageError("invalid command line"), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
    except (ConfigError, UsageError, OSError) as exc:
        return _error(args.command, exc, EXIT_USAGE)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args, cfg)
    except UsageError as exc:
        return _error(args.command, exc, EXIT_USAGE)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable record
        log.debug("command failed", exc_info=True)
        return _error(args.command, exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
