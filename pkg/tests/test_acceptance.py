"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that is printed in the pytest terminal summary.

Run with ``pytest tests/test_acceptance.py -v``. The first run trains the
LWDD network and caches it (see conftest); the 10k-image width sweep takes
a further quarter hour or so on one core.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from _models import random_quantized, random_small_model
from conftest import CACHE, TRAIN_CONFIG
from fxpcnn.cycles import total_cycles
from fxpcnn.engine import forward_fxp, infer_fxp_batch, quantize_pixels
from fxpcnn.fixedpoint import QFormat, RoundingStrategy
from fxpcnn.frames import block_average, to_gray
from fxpcnn.io import ModelBundle, export_packed, import_packed, load_bundle, parse_idx, save_bundle, write_idx
from fxpcnn.nn import build_lwdd, init_weights, predict_logits
from fxpcnn.quantization import make_profile, quantize, reduce_weights, sweep_bitwidths, worst_case_ranges
from fxpcnn.reference import reference_infer
from fxpcnn.training import augmented_copy, evaluate, grad_check

GOLDEN = Path(__file__).parent / "golden"

AT_END, PER_OP = RoundingStrategy.AT_END, RoundingStrategy.PER_OPERATION

# calibration images: the first 10k training digits, augmented with their own seed
CALIB_SIZE = 10_000
CALIB_AUGMENT_SEED = 2
SWEEP_PROFILE = "percent:0.05+fit"
SWEEP_WIDTHS = range(8, 23)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def calibration(mnist_train):
    from conftest import AUGMENT

    return augmented_copy(mnist_train.subset(slice(0, CALIB_SIZE)), AUGMENT, CALIB_AUGMENT_SEED)


@pytest.fixture(scope="module")
def float_classes(trained, augmented_test):
    return predict_logits(trained.config, trained.weights, augmented_test.images).argmax(axis=1)


@pytest.fixture(scope="module")
def sweep(trained, augmented_test, calibration, float_classes):
    profile = make_profile(trained.config, trained.weights, SWEEP_PROFILE, calibration)
    report = sweep_bitwidths(trained.config, trained.weights, profile, augmented_test, SWEEP_WIDTHS,
                             [PER_OP, AT_END], float_classes=float_classes)
    CACHE.mkdir(parents=True, exist_ok=True)
    (CACHE / "acceptance-sweep.csv").write_text(report.to_long_csv())
    return report


def test_1_training_accuracy(trained, augmented_test, verdict):
    acc = evaluate(trained.config, trained.weights, augmented_test)
    trace = trained.provenance["trace"]
    seconds = sum(row["seconds"] for row in trace)
    ok = acc >= 0.90 and len(trace) == TRAIN_CONFIG.epochs == 10 and seconds <= 30 * 60
    verdict(1, ok, f"test accuracy {acc:.4f} on {len(augmented_test)} augmented digits "
                   f"({'meets' if acc >= 0.93 else 'misses'} the 0.93 target), "
                   f"{len(trace)} epochs in {seconds / 60:.1f} min")
    assert ok


def test_2_parameter_budget(verdict):
    n = build_lwdd(10).count_weights()
    assert verdict(2, n == 4660, f"{n} weights")


def test_3_width_sweep_shape(sweep, verdict):
    at_end, per_op = sweep.first_zero(AT_END), sweep.first_zero(PER_OP)
    r_op, r_end = sweep.ratio(10, PER_OP), sweep.ratio(10, AT_END)
    a = at_end is not None and at_end <= 14
    b = at_end is not None and per_op is not None and per_op > at_end
    c = r_op > r_end
    stable = {s.value: sweep.zero_threshold(s) for s in (AT_END, PER_OP)}
    verdict(3, a and b and c,
            f"first zero-mismatch width at-end {at_end}, per-operation {per_op} "
            f"(zero from then on: {stable}); N=10 mismatch {100 * r_op:.2f}% vs {100 * r_end:.2f}%")
    failed = [msg for ok, msg in ((a, f"at-end first reaches zero at {at_end}, above 14"),
                                  (b, f"per-operation zero width {per_op} not above at-end {at_end}"),
                                  (c, "per-operation not worse than at-end at N=10")) if not ok]
    assert not failed, "; ".join(failed)


def test_4_reduction_equivalence(trained, augmented_test, calibration, float_classes, verdict):
    m, w = trained.config, trained.weights
    disagreements = {}
    for spec in ("worst-case", SWEEP_PROFILE):
        reduced = reduce_weights(w, make_profile(m, w, spec, calibration))
        cls = predict_logits(m, reduced, augmented_test.images).argmax(axis=1)
        disagreements[spec] = int(np.count_nonzero(cls != float_classes))
    ok = not any(disagreements.values())
    verdict(4, ok, f"arg-max disagreements on {len(augmented_test)} digits: {disagreements}")
    assert ok


def test_5_range_soundness(trained, calibration, verdict):
    m, w = trained.config, trained.weights
    rng = np.random.default_rng(5)
    n = 100_000
    images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    # a tenth of them at the corners of the input box
    images[: n // 10] = rng.integers(0, 2, size=(n // 10, 28, 28), dtype=np.uint8) * 255
    wc = quantize(m, w, worst_case_ranges(m, w), QFormat(16))
    wc_events = {AT_END.value: int(infer_fxp_batch(wc, images, AT_END)[1].sum()),
                 PER_OP.value: int(infer_fxp_batch(wc, images[:20_000], PER_OP)[1].sum())}

    cal = quantize(m, w, make_profile(m, w, "percent:0", calibration), QFormat(16))
    cal_events = {s.value: int(infer_fxp_batch(cal, calibration.images, s)[1].sum()) for s in (AT_END, PER_OP)}
    # weights clipped by the quantizer are a property of the model, not of
    # any inference, so they are reported here but not counted as events
    ok = not any(wc_events.values()) and not any(cal_events.values())
    verdict(5, ok, f"worst-case, N=16: events {wc_events} on {n} / 20000 random inputs; "
                   f"percent:0 on its {len(calibration)} calibration digits, N=16: "
                   f"events {cal_events} ({cal.weight_saturations} weights clipped at quantization)")
    assert not any(wc_events.values())
    assert not any(cal_events.values())


def test_6_engine_matches_reference(verdict):
    rng = np.random.default_rng(6)
    differences = compared = saturated = 0
    for _ in range(50):
        qm = random_quantized(rng)
        images = rng.integers(0, 256, size=(20,) + qm.config.input_shape)
        for s in RoundingStrategy:
            _, counts, trace = forward_fxp(qm, quantize_pixels(images, qm.fmt), s, record=True)
            for i, img in enumerate(images):
                _, ref_count, ref_trace = reference_infer(qm, img, s)
                compared += 1
                saturated += ref_count > 0
                same = counts[i] == ref_count and all(t[i].tolist() == r for t, r in zip(trace, ref_trace))
                differences += not same
    verdict(6, differences == 0, f"{differences} differing inferences out of {compared} "
                                 f"(50 models x 20 inputs x 2 strategies, {saturated} with saturation)")
    assert differences == 0


def test_7_gradient_check(verdict):
    rng = np.random.default_rng(7)
    errors = []
    for _ in range(10):
        m = random_small_model(rng)
        w = init_weights(m, rng)
        img = rng.uniform(size=m.input_shape)
        errors.append(grad_check(m, w, img, int(rng.integers(m.num_outputs)), n_check=200, seed=int(rng.integers(1000))))
    worst = max(errors)
    assert verdict(7, worst < 1e-4, f"max relative error {worst:.2e} over 10 random models")


def test_8_cycle_model(verdict):
    m = build_lwdd()
    one, two, four = (total_cycles(m, k) for k in (1, 2, 4))
    expected = {"Processing 1st conv layer": 12605, "Processing 2nd conv layer": 50416,
                "Processing 4th conv layer": 25569, "Processing 5th conv layer": 51136,
                "Processing 7th conv layer": 27009, "Processing 8th conv layer (+GlobalMaxPooling)": 54016}
    rows = {s.name: s.cycles for s in one.stages}
    rows_exact = all(rows.get(name) == c for name, c in expected.items())
    checks = [
        abs(one.total - 236746) <= 5,
        rows_exact,
        abs(two.total - 125320) <= 0.03 * 125320,
        abs(four.total - 67861) <= 0.03 * 67861,
        abs(two.speedup - 1.89) <= 0.1,
        abs(four.speedup - 3.49) <= 0.1,
    ]
    verdict(8, all(checks), f"totals {one.total} / {two.total} / {four.total}, speed-ups "
                            f"{two.speedup:.2f} / {four.speedup:.2f}, conv rows exact: {rows_exact}")
    assert all(checks)


def test_9_preprocessing_bit_exact(verdict):
    rng = np.random.default_rng(9)
    r, g, b = rng.integers(0, 256, size=(3, 1_000_000))
    gray = to_gray(r, g, b)
    shift = ((g << 3) + 5 * r + 3 * b) >> 4
    gray_diff = int(np.count_nonzero(gray.astype(np.int64) != shift))

    # hand-made pattern: a different constant per 8x8 block, a checkerboard
    # in one quadrant and a gradient in another, so truncation matters
    yy, xx = np.mgrid[0:224, 0:224]
    pattern = ((yy // 8) * 7 + (xx // 8) * 3) % 256
    pattern[:112, :112] = np.where((yy[:112, :112] + xx[:112, :112]) % 2, 255, 0)
    pattern[112:, 112:] = (yy[112:, 112:] + 2 * xx[112:, 112:]) % 256
    pattern = pattern.astype(np.uint8)
    brute = np.array([[sum(int(pattern[8 * i + a, 8 * j + c]) for a in range(8) for c in range(8)) // 64
                       for j in range(28)] for i in range(28)])
    avg_diff = int(np.count_nonzero(block_average(pattern) != brute))
    ok = gray_diff == 0 and avg_diff == 0
    verdict(9, ok, f"to_gray differences {gray_diff} / 1000000, block_average differences {avg_diff} / 784")
    assert ok


def test_10_format_round_trips(tmp_path, verdict):
    import importlib.util

    spec = importlib.util.spec_from_file_location("golden_regen", GOLDEN / "regenerate.py")
    g = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(g)

    failures = []
    for name in ("two-images.idx3", "two-labels.idx1"):
        raw = (GOLDEN / name).read_bytes()
        if write_idx(parse_idx(raw)) != raw:
            failures.append(name)
    for name in ("float-bundle", "quantized-bundle"):
        b = load_bundle(GOLDEN / name)
        out = save_bundle(ModelBundle(b.config, b.weights, b.frac_bits, b.profile, b.provenance), tmp_path / name)
        for f in sorted((GOLDEN / name).iterdir()):
            if (out / f.name).read_bytes() != f.read_bytes():
                failures.append(f"{name}/{f.name}")
        if load_bundle(out) != b:
            failures.append(f"{name} reload")
    q = load_bundle(GOLDEN / "quantized-bundle")
    packed = export_packed(q.config, q.weights, q.frac_bits, tmp_path / "packed.hex")
    if packed.read_bytes() != (GOLDEN / "packed.hex").read_bytes():
        failures.append("packed.hex")
    mant, n = import_packed(GOLDEN / "packed.hex", g.MODEL)
    if n != q.frac_bits or any(not ((a is None and b is None) or np.array_equal(a, b))
                               for a, b in zip(mant, q.weights)):
        failures.append("packed import")
    assert verdict(10, not failures, "byte-identical" if not failures else f"mismatches: {failures}")
