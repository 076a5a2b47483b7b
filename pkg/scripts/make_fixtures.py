"""Regenerate the checked-in test fixtures under tests/fixtures.

    python scripts/make_fixtures.py

Writes four synthetic two-lead records and one noise record in WFDB
format, a CSV export of the first record, and a golden int8 model with
its int8 inputs and expected logits.  The golden logits are produced by
this build once and compared bit-for-bit by the tests.
"""

from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np

from ecgformer.containers import write_container
from ecgformer.dataset import ALL_CONDITIONS, build_beatset, make_split
from ecgformer.model import ModelConfig
from ecgformer.quant.qmodel import calibrate, int_forward, qat_finetune
from ecgformer.signal_io import write_record_csv, write_record_wfdb
from ecgformer.synthetic import synth_noise_record, synth_record
from ecgformer.training import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"
RECORDS = [("f100", 0), ("f101", 1), ("f102", 2), ("f103", 3)]
DURATION_S = 90.0


def main() -> None:
    if ROOT.exists():
        shutil.rmtree(ROOT)
    rec_dir = ROOT / "records"
    recs = [synth_record(name, DURATION_S, seed=seed) for name, seed in RECORDS]
    for r in recs:
        write_record_wfdb(r, rec_dir)
    write_record_csv(recs[0], ROOT / "csv")
    noise = synth_noise_record("em", DURATION_S, seed=99)
    write_record_wfdb(noise, ROOT / "noise")

    bs = build_beatset(recs, ALL_CONDITIONS, noise.physical(0), seed=0)
    sp = make_split(len(bs))
    tr, va = bs.gather(sp.train), bs.gather(sp.valid)
    cfg = TrainConfig(epochs=3, seed=0)
    res = train(cfg, tr, va, ModelConfig())
    scales = calibrate(res.params, [(tr[0], tr[1])])
    qm, _ = qat_finetune(res.params, scales, tr, va, cfg, epochs=1)
    qm.save(ROOT / "golden_model.bin", {"fixture": "golden"})

    te = bs.gather(sp.test)
    w, r = qm.quantize_inputs(te[0][:32], te[1][:32])
    write_container(ROOT / "golden_inputs.bin", {"fixture": "golden"}, {"windows": w, "rr": r})
    logits = int_forward(w, r, qm)
    np.savetxt(ROOT / "golden_logits.csv", logits, fmt="%d", delimiter=",")
    print(f"wrote fixtures to {ROOT}: {len(bs)} beats")


if __name__ == "__main__":
    main()
