import csv
import json

import numpy as np
import pytest

from ecgformer.cli import main
from ecgformer.dataset import BeatSet
from ecgformer.evaluation import report_is_consistent
from ecgformer.model import ModelParams
from ecgformer.quant.qmodel import QuantizedModel


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_record(err):
    rec = json.loads(err.strip().splitlines()[-1])
    assert set(rec) == {"error", "message", "command", "exit_code"}
    return rec


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, fixtures_dir):
    """Runs the pipeline once: augment, split, train, quantize."""
    d = tmp_path_factory.mktemp("cli")
    recs, noise = fixtures_dir / "records", fixtures_dir / "noise" / "em"
    assert main(["augment", "--records", str(recs), "--noise", str(noise), "--out", str(d / "data.bin")]) == 0
    assert main(["split", "--data", str(d / "data.bin"), "--out", str(d / "split.json")]) == 0
    assert main(["train", "--data", str(d / "data.bin"), "--split", str(d / "split.json"), "--epochs", "2",
                 "--log", str(d / "train.jsonl"), "--out", str(d / "model.bin")]) == 0
    assert main(["quantize", "--data", str(d / "data.bin"), "--ckpt", str(d / "model.bin"),
                 "--qat-epochs", "1", "--out", str(d / "q.bin")]) == 0
    return d


def test_count_default(capsys):
    code, out, _ = run(capsys, "count")
    assert code == 0
    lines = dict(s.split("=", 1) for s in out.splitlines())
    assert lines["params"] == "6643"
    assert abs(float(lines["mops"]) - 0.97) / 0.97 < 0.15
    assert "config_hash" in lines


def test_count_json_and_config(capsys, tmp_path):
    (tmp_path / "c.yaml").write_text("model: {embed_dim: 32, use_rr: false}\n")
    code, out, _ = run(capsys, "count", "--json", "--config", tmp_path / "c.yaml")
    doc = json.loads(out)
    assert code == 0 and doc["params"] == 15173 and doc["seed"] == 0


def test_usage_errors(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and error_record(err)["exit_code"] == 2
    code, _, err = run(capsys)
    assert code == 2


def test_invalid_config(capsys, tmp_path):
    (tmp_path / "bad.yaml").write_text("model: {embed_dim: 15}\n")
    code, _, err = run(capsys, "count", "--config", tmp_path / "bad.yaml")
    assert code == 2 and error_record(err)["error"] == "ConfigError"
    (tmp_path / "typo.yaml").write_text("modle: {}\n")
    code, _, err = run(capsys, "count", "--config", tmp_path / "typo.yaml")
    assert code == 2 and "modle" in error_record(err)["message"]


def test_missing_input(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--data", tmp_path / "nope.bin", "--ckpt", tmp_path / "m.bin",
                       "--report", tmp_path / "r.json")
    rec = error_record(err)
    assert code == 1 and rec["error"] == "FileNotFoundError" and rec["command"] == "eval"
    assert not (tmp_path / "r.json").exists()


def test_bad_threads(capsys):
    code, _, _ = run(capsys, "count", "--threads", "0")
    assert code == 2


def test_ingest(capsys, tmp_path, fixtures_dir):
    code, _, _ = run(capsys, "ingest", "--records", fixtures_dir / "records", "--out", tmp_path / "i.json")
    doc = json.loads((tmp_path / "i.json").read_text())
    assert code == 0 and set(doc["records"]) == {"f100", "f101", "f102", "f103"}
    assert sum(doc["totals"].values()) == sum(sum(r.values()) for r in doc["records"].values())
    assert "102" in doc["excluded"] and "config_hash" in doc


def test_export_csv(capsys, tmp_path, fixtures_dir):
    code, _, _ = run(capsys, "export-csv", "--record", fixtures_dir / "records" / "f100", "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "f100.csv").read_text() == (fixtures_dir / "csv" / "f100.csv").read_text()


def test_denoise_and_detect(capsys, tmp_path, fixtures_dir):
    rec = fixtures_dir / "records" / "f101"
    code, _, _ = run(capsys, "denoise", "--record", rec, "--out", tmp_path / "d.csv")
    with open(tmp_path / "d.csv") as fh:
        rows = list(csv.reader(fh))
    assert code == 0 and rows[0] == ["sample_index", "raw_mv", "denoised_mv"] and len(rows) > 1000
    code, _, _ = run(capsys, "detect", "--record", rec, "--out", tmp_path / "p.json")
    doc = json.loads((tmp_path / "p.json").read_text())
    assert code == 0 and doc["sensitivity"] >= 0.99 and doc["tolerance_samples"] == 54
    code, _, err = run(capsys, "detect", "--record", rec, "--lead", "V9", "--out", tmp_path / "q.json")
    assert code == 1 and "V9" in error_record(err)["message"]


def test_segment(capsys, tmp_path, fixtures_dir):
    code, _, _ = run(capsys, "segment", "--records", fixtures_dir / "records", "--exclude-records", "f103",
                     "--out", tmp_path / "s.bin")
    bs = BeatSet.load(tmp_path / "s.bin")
    assert code == 0 and len(bs.conditions) == 1 and "f103" not in set(bs.records)
    assert "config_hash" in bs.meta


def test_pipeline_artifacts(workdir):
    bs = BeatSet.load(workdir / "data.bin")
    assert len(bs.conditions) == 4
    split = json.loads((workdir / "split.json").read_text())
    assert split["n"] == len(bs) and len(split["folds"]) == 5
    log = [json.loads(s) for s in (workdir / "train.jsonl").read_text().splitlines()]
    assert len(log) == 2
    params, meta = ModelParams.load(workdir / "model.bin")
    assert params.count() == 6643 and "config_hash" in meta and meta["seed"] == 0
    qm, qmeta = QuantizedModel.load(workdir / "q.bin")
    assert qmeta["qat_epochs"] == 1 and qm.config == params.config


def test_train_byte_identical(capsys, workdir, tmp_path):
    args = ["train", "--data", workdir / "data.bin", "--epochs", "1", "--threads", "1"]
    run(capsys, *args, "--out", tmp_path / "a.bin")
    run(capsys, *args, "--out", tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    run(capsys, *args, "--seed", "1", "--out", tmp_path / "c.bin")
    assert (tmp_path / "a.bin").read_bytes() != (tmp_path / "c.bin").read_bytes()


@pytest.mark.parametrize("noise", ["none", "3", "mix"])
def test_eval_reports(capsys, workdir, tmp_path, noise):
    code, out, _ = run(capsys, "eval", "--data", workdir / "data.bin", "--split", workdir / "split.json",
                       "--ckpt", workdir / "model.bin", "--noise", noise, "--report", tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert code == 0 and report_is_consistent(doc)
    assert doc["noise"] == noise and doc["int8"] is False and out.startswith("accuracy=")
    n_test = len(json.loads((workdir / "split.json").read_text())["single"]["test"])
    assert doc["n"] == (4 * n_test if noise == "mix" else n_test)


def test_eval_int8(capsys, workdir, tmp_path):
    code, _, _ = run(capsys, "eval", "--int8", "--data", workdir / "data.bin", "--split", workdir / "split.json",
                     "--ckpt", workdir / "q.bin", "--report", tmp_path / "r.json",
                     "--logits-out", tmp_path / "l.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    logits = np.loadtxt(tmp_path / "l.csv", delimiter=",", dtype=np.int64)
    assert code == 0 and doc["int8"] and report_is_consistent(doc)
    assert logits.shape == (doc["n"], 5)


def test_eval_int8_golden(capsys, fixtures_dir, workdir, tmp_path):
    # the checked-in golden inputs are the first test beats of the fixture dataset
    code, _, _ = run(capsys, "eval", "--int8", "--data", workdir / "data.bin", "--split", workdir / "split.json",
                     "--ckpt", fixtures_dir / "golden_model.bin", "--report", tmp_path / "r.json",
                     "--logits-out", tmp_path / "l.csv")
    expected = np.loadtxt(fixtures_dir / "golden_logits.csv", delimiter=",", dtype=np.int64)
    got = np.loadtxt(tmp_path / "l.csv", delimiter=",", dtype=np.int64)
    assert code == 0 and np.array_equal(got[: len(expected)], expected)


def test_sweep(capsys, workdir, tmp_path):
    code, _, _ = run(capsys, "sweep", "--data", workdir / "data.bin", "--split", workdir / "split.json",
                     "--ckpt", workdir / "model.bin", "--out", tmp_path / "s.csv")
    with open(tmp_path / "s.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert code == 0 and [r["test_condition"] for r in rows] == ["noiseless", "snr24", "snr10", "snr3", "mix"]
    assert rows[0]["train_condition"] == "noiseless"
    code, _, _ = run(capsys, "eval", "--data", workdir / "data.bin", "--split", workdir / "split.json",
                     "--ckpt", workdir / "model.bin", "--report", tmp_path / "r.json")
    assert float(rows[0]["accuracy"]) == json.loads((tmp_path / "r.json").read_text())["accuracy"]


def test_cv(capsys, workdir, tmp_path):
    code, _, _ = run(capsys, "cv", "--data", workdir / "data.bin", "--folds", "2", "--epochs", "1",
                     "--out-dir", tmp_path)
    doc = json.loads((tmp_path / "cv_report.json").read_text())
    assert code == 0 and len(doc["folds"]) == 2
    assert all(report_is_consistent(f) for f in doc["folds"])
    assert report_is_consistent(doc["aggregate"]["pooled"])
    assert doc["aggregate"]["std"] == "sample (n-1)"


def test_inputs_not_mutated(capsys, workdir, tmp_path):
    before = (workdir / "model.bin").read_bytes(), (workdir / "data.bin").read_bytes()
    run(capsys, "eval", "--data", workdir / "data.bin", "--ckpt", workdir / "model.bin",
        "--report", tmp_path / "r.json")
    assert ((workdir / "model.bin").read_bytes(), (workdir / "data.bin").read_bytes()) == before
