import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fxpcnn.cli import main
from fxpcnn.fixedpoint import QFormat
from fxpcnn.frames import write_pnm
from fxpcnn.io import ModelBundle, load_bundle, save_bundle, write_idx
from fxpcnn.nn import build_lwdd, init_weights
from fxpcnn.quantization import quantize, worst_case_ranges

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def float_bundle(tmp_path):
    m = build_lwdd()
    w = [None if x is None else x.astype(np.float32).astype(np.float64) for x in init_weights(m, 0)]
    return save_bundle(ModelBundle(m, w), tmp_path / "float")


@pytest.fixture
def tiny_idx(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=12, dtype=np.uint8)
    (tmp_path / "img.idx3").write_bytes(write_idx(imgs))
    (tmp_path / "lab.idx1").write_bytes(write_idx(labels))
    return tmp_path / "img.idx3", tmp_path / "lab.idx1"


def test_cycles(capsys, tmp_path):
    code, out, _ = run(capsys, "cycles", "--conv-blocks", 1, "--csv", tmp_path / "c.csv")
    assert code == 0
    total = int(out.split("Total")[1].split()[0])
    assert abs(total - 236746) <= 5
    assert "Processing 1st conv layer" in out and "12605" in out
    rows = list(csv.reader(io.StringIO((tmp_path / "c.csv").read_text())))
    assert rows[-1] == ["Total", str(total)]


def test_cycles_parallel(capsys):
    code, out, _ = run(capsys, "cycles", "--conv-blocks", 4)
    assert code == 0 and "Speed-up" in out


def test_infer_black_image_zero_bundle(capsys, tmp_path):
    m = build_lwdd()
    zeros = [None if x is None else np.zeros(x.shape, np.int64) for x in init_weights(m, 0)]
    prof = worst_case_ranges(m, init_weights(m, 0))
    save_bundle(ModelBundle(m, zeros, 12, prof.to_dict()), tmp_path / "q")
    write_pnm(tmp_path / "black.pgm", np.zeros((240, 320), np.uint8))
    code, out, _ = run(capsys, "infer", tmp_path / "q", tmp_path / "black.pgm", "--json")
    assert code == 0
    res = json.loads(out)
    assert res["class"] == 0 and res["overflow"] == 0 and res["logits"] == [0] * 10


def test_quantize_infer_dump_export(capsys, tmp_path, float_bundle):
    code, out, _ = run(capsys, "quantize", float_bundle, "--bits", 10, "--profile", "worst-case",
                       "--out", tmp_path / "q")
    assert code == 0 and "N=10" in out
    q = load_bundle(tmp_path / "q")
    f = load_bundle(float_bundle)
    expected = quantize(f.config, f.weights, worst_case_ranges(f.config, f.weights), QFormat(10))
    for a, e in zip(q.weights, expected.mantissas):
        assert (a is None and e is None) or np.array_equal(a, e)

    frame = np.random.default_rng(1).integers(0, 256, size=(240, 320, 3), dtype=np.uint8)
    write_pnm(tmp_path / "f.ppm", frame)
    code, out, _ = run(capsys, "infer", tmp_path / "q", tmp_path / "f.ppm", "--strategy", "per-operation",
                       "--dump", tmp_path / "dump.txt")
    assert code == 0 and out.startswith("class ")
    assert (tmp_path / "dump.txt").read_text().startswith("# layer -1 input")

    code, _, _ = run(capsys, "export-packed", tmp_path / "q", tmp_path / "p.hex")
    assert code == 0
    assert (tmp_path / "p.hex").read_text().startswith("# fxpcnn packed weights frac_bits 10")

    code, _, err = run(capsys, "export-packed", float_bundle, tmp_path / "p2.hex")
    assert code == 2 and "quantized" in err


def test_quantize_calibrated(capsys, tmp_path, float_bundle, tiny_idx):
    code, out, _ = run(capsys, "quantize", float_bundle, "--bits", 12, "--profile", "percent:0.05",
                       "--calib", tiny_idx[0], "--out", tmp_path / "q")
    assert code == 0
    assert load_bundle(tmp_path / "q").profile["method"] == "percent"


def test_sweep_layout(capsys, tmp_path, float_bundle, tiny_idx):
    code, out, err = run(capsys, "sweep", float_bundle, "--test-images", tiny_idx[0], "--test-labels", tiny_idx[1],
                         "--bits-from", 10, "--bits-to", 18, "--strategy", "both", "--out", tmp_path / "s.csv")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["bits", "per-operation_pct", "at-end_pct"]
    assert [int(r[0]) for r in rows[1:]] == list(range(10, 19))
    assert len(rows[1:]) * (len(rows[0]) - 1) == 9 * 2
    assert (tmp_path / "s.csv").read_text() == out
    assert err.count("mismatch") == 18


def test_sweep_long(capsys, float_bundle, tiny_idx):
    code, out, _ = run(capsys, "sweep", float_bundle, "--test-images", tiny_idx[0], "--bits-from", 12,
                       "--bits-to", 13, "--strategy", "at-end", "--long")
    assert code == 0 and len(out.splitlines()) == 3


def test_preprocess(capsys, tmp_path):
    frame = np.full((240, 320, 3), 200, np.uint8)
    write_pnm(tmp_path / "f.ppm", frame)
    code, _, _ = run(capsys, "preprocess", tmp_path / "f.ppm", tmp_path / "d.pgm", "--plain")
    assert code == 0
    text = (tmp_path / "d.pgm").read_text().split()
    assert text[:4] == ["P2", "28", "28", "255"] and set(text[4:]) == {"200"}


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--n-check", 20)
    assert code == 0
    assert float(out.split()[-1]) < 1e-4


def test_train_small(capsys, tmp_path, tiny_idx):
    code, out, _ = run(capsys, "train", "--train-images", tiny_idx[0], "--train-labels", tiny_idx[1],
                       "--test-images", tiny_idx[0], "--test-labels", tiny_idx[1], "--epochs", 1,
                       "--out", tmp_path / "b", "--csv", tmp_path / "acc.csv")
    assert code == 0 and "epoch 1" in out
    assert load_bundle(tmp_path / "b").kind == "float"
    assert (tmp_path / "acc.csv").read_text().startswith("epoch,train_acc,test_acc")


def test_deterministic(capsys, tmp_path, tiny_idx):
    outs = []
    for k in range(2):
        run(capsys, "train", "--train-images", tiny_idx[0], "--train-labels", tiny_idx[1], "--no-test",
            "--epochs", 1, "--seed", 5, "--out", tmp_path / f"b{k}")
        outs.append((tmp_path / f"b{k}" / "layer0.bin").read_bytes())
    assert outs[0] == outs[1]


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["cycles", "--bogus"], ["quantize", "x"],
                                  ["sweep", "x", "--bits-from", "12", "--bits-to", "10"],
                                  ["cycles", "--conv-blocks", "0"]])
def test_usage_errors(capsys, argv, tmp_path, float_bundle):
    argv = [str(float_bundle) if a == "x" else a for a in argv]
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert err


def test_data_errors(capsys, tmp_path, float_bundle):
    code, _, err = run(capsys, "infer", tmp_path / "missing", tmp_path / "x.pgm")
    assert code == 2 and "error" in err
    (tmp_path / "bad.pgm").write_bytes(b"P9\n")
    code, _, _ = run(capsys, "infer", float_bundle, tmp_path / "bad.pgm")
    assert code == 2
    (tmp_path / "bad.idx").write_bytes(b"\x00\x00\x08\x03\x00")
    code, _, err = run(capsys, "quantize", float_bundle, "--bits", 8, "--profile", "percent:0",
                       "--calib", tmp_path / "bad.idx", "--out", tmp_path / "q")
    assert code == 2 and "truncated" in err


def test_help_and_module_entry():
    res = subprocess.run([sys.executable, "-m", "fxpcnn", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("train", "quantize", "sweep", "infer", "preprocess", "cycles", "export-packed", "gradcheck"):
        assert sub in res.stdout
