import csv
import json

import numpy as np
import pytest

from ms2s import bench
from ms2s.cli import main
from ms2s.numcore import ops
from ms2s.scoring import parse_rttm


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["make-toy-corpus", "--out-dir", str(out), "--recordings", "2", "--duration", "4", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps({"preset": "tiny", "n_mels": 8, "n_max": 2, "memory_k": 4, "dtype": "float64"}))
    return p


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["score", "--ref", "x"]) == 2
    assert main(["score", "--ref", "/nonexistent.rttm", "--hyp", "/nonexistent.rttm"]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"colar": 0.1}')
    assert main(["score", "--config", str(p), "--ref", "a", "--hyp", "b"]) == 2


def test_score_writes_csv_and_plot(corpus, tmp_path, capsys):
    ref = corpus / "reference.rttm"
    out = tmp_path / "rep.csv"
    assert main(["score", "--ref", str(ref), "--hyp", str(ref), "--out-csv", str(out), "--collar", "0"]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["recording"] for r in rows] == ["toy000", "toy001", "MACRO"]
    assert all(float(r["der"]) == 0 for r in rows)
    assert out.with_suffix(".png").stat().st_size > 0
    assert "macro DER 0.00%" in capsys.readouterr().out


def test_extract_features(corpus, tmp_path):
    from ms2s.features import load_features

    assert main(["extract-features", "--wav-dir", str(corpus), "--out-dir", str(tmp_path), "--n-mels", "24"]) == 0
    fm = load_features(tmp_path / "toy000_ch0.feat")
    assert fm.F == 24 and fm.T == 398
    assert (tmp_path / "extract-features.config.json").exists()


def test_init_diar(corpus, tmp_path):
    out = tmp_path / "init.rttm"
    assert main(["init-diar", "--wav-dir", str(corpus), "--out", str(out), "--n-speakers", "2"]) == 0
    segs = parse_rttm(out)
    assert {s.rec_id for s in segs} <= {"toy000", "toy001"}
    assert all(len({s.speaker for s in segs if s.rec_id == r}) <= 2 for r in ("toy000", "toy001"))


def test_build_memory(corpus, tmp_path):
    from ms2s.storage import read_memory_bank

    assert main(["build-memory", "--wav-dir", str(corpus), "--out-dir", str(tmp_path), "--k", "3"]) == 0
    assert read_memory_bank(tmp_path / "xvector.mem").shape == (3, 256)
    assert read_memory_bank(tmp_path / "ivector.mem").shape == (3, 100)


def test_train_infer_score(corpus, tiny_cfg, tmp_path):
    run = tmp_path / "run"
    args = ["--config", str(tiny_cfg)]
    assert main(["train", *args, "--corpus", str(corpus), "--out-dir", str(run), "--epochs", "2", "--lr", "1e-3", "--dropout", "0"]) == 0
    assert (run / "epoch2.json").exists() and (run / "training.png").exists()
    assert (run / "metrics.csv").read_text().startswith("epoch,loss,train_der\n")
    saved = json.loads((run / "train.config.json").read_text())
    assert saved["preset"] == "tiny" and saved["dropout"] == 0.0

    hyp = tmp_path / "hyp.rttm"
    post = tmp_path / "post"
    code = main(["infer", *args, "--model", str(run / "model.json"), "--wav-dir", str(corpus), "--out", str(hyp),
                 "--iters", "2", "--posteriors-dir", str(post), "--init-rttm", str(corpus / "reference.rttm")])
    assert code == 0
    from ms2s.storage import read_posteriors

    y, hop = read_posteriors(post / "toy000.post")
    assert y.shape[0] == 2 and hop == 10 and ((y >= 0) & (y <= 1)).all()
    assert main(["score", "--ref", str(corpus / "reference.rttm"), "--hyp", str(hyp)]) == 0


def test_infer_missing_model(corpus, tmp_path):
    assert main(["infer", "--model", str(tmp_path / "no.json"), "--wav-dir", str(corpus), "--out", str(tmp_path / "h.rttm")]) == 2


def test_gradcheck_passes_and_catches_fault(capsys):
    assert main(["gradcheck", "--list"]) == 0
    listed = capsys.readouterr().out
    assert "decoder.0.beta1" in listed or "beta1" in listed
    assert main(["gradcheck"]) == 0
    assert main(["gradcheck", "--inject-fault", "gate-sign"]) == 1
    assert ops._GATE_GRAD_SIGN == 1.0
    out = capsys.readouterr().out
    assert "FAIL" in out and "beta" in out


def test_bench(tmp_path, capsys, tiny_cfg):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", str(tiny_cfg), "--T", "40,80", "--repeats", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(bench.CSV_FIELDS)
    assert len(lines) == 1 + 3 * 2
    assert out.with_suffix(".png").exists()
    assert "R^2" in capsys.readouterr().out


def test_bench_helpers():
    x = [1, 2, 3, 4]
    assert bench.linear_r2(x, [3 * v + 1 for v in x]) == pytest.approx(1.0)
    assert bench.linear_r2(x, [1, 4, 1, 4]) < 0.5
    assert bench.loglog_slope(x, [v**2 for v in x]) == pytest.approx(2.0)
    assert bench.linear_r2(x, [5, 5, 5, 5]) == 1.0


def test_measure_reports_allocation():
    _, small = bench.measure(lambda: np.ones(1000), repeats=1)
    _, big = bench.measure(lambda: np.ones(100_000), repeats=1)
    assert big > small and big >= 800_000
