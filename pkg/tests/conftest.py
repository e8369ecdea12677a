"""Shared fixtures. The trained LWDD network is expensive (about a quarter
hour on one CPU core), so it is trained once per configuration and cached
under ``.cache/`` at the repository root, keyed by a hash of the training
settings and the source of the modules that determine the result."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
import pytest

import fxpcnn.nn
import fxpcnn.training
from fxpcnn.io import ModelBundle, default_mnist_dir, load_bundle, load_mnist, save_bundle
from fxpcnn.nn import build_lwdd
from fxpcnn.training import AugmentationConfig, TrainConfig, augmented_copy, train

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("FXPCNN_CACHE_DIR", ROOT / ".cache"))

# Pinned configuration used by the acceptance suite.
TRAIN_CONFIG = TrainConfig(epochs=10, batch_size=32, learning_rate=0.02, momentum=0.9, seed=0, lr_decay=0.8)
AUGMENT = AugmentationConfig()
TEST_AUGMENT_SEED = 1

MNIST_DIR = default_mnist_dir()
needs_mnist = pytest.mark.skipif(MNIST_DIR is None, reason="MNIST IDX files not available")


def _config_hash() -> str:
    h = hashlib.sha256()
    h.update(json.dumps(TRAIN_CONFIG.__dict__, sort_keys=True).encode())
    h.update(json.dumps(AUGMENT.__dict__, sort_keys=True).encode())
    for mod in (fxpcnn.nn, fxpcnn.training):
        h.update(Path(mod.__file__).read_bytes())
    return h.hexdigest()[:16]


def trained_bundle_path() -> Path:
    return CACHE / f"lwdd-{_config_hash()}"


def get_trained_bundle() -> ModelBundle:
    path = trained_bundle_path()
    if (path / "manifest.json").exists():
        return load_bundle(path)
    if MNIST_DIR is None:
        pytest.skip("MNIST IDX files not available")
    logging.getLogger("fxpcnn").info("training LWDD for the test cache at %s", path)
    tr = load_mnist(MNIST_DIR, "train")
    te = augmented_copy(load_mnist(MNIST_DIR, "test"), AUGMENT, TEST_AUGMENT_SEED)
    model = build_lwdd(10)
    weights, trace = train(model, tr, AUGMENT, TRAIN_CONFIG, test_data=te)
    bundle = ModelBundle(model, weights, provenance={
        "train": TRAIN_CONFIG.__dict__, "trace": trace, "test_augment_seed": TEST_AUGMENT_SEED})
    save_bundle(bundle, path)
    return load_bundle(path)


@pytest.fixture(scope="session")
def mnist_train():
    if MNIST_DIR is None:
        pytest.skip("MNIST IDX files not available")
    return load_mnist(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    if MNIST_DIR is None:
        pytest.skip("MNIST IDX files not available")
    return load_mnist(MNIST_DIR, "test")


@pytest.fixture(scope="session")
def augmented_test(mnist_test):
    return augmented_copy(mnist_test, AUGMENT, TEST_AUGMENT_SEED)


@pytest.fixture(scope="session")
def trained():
    return get_trained_bundle()


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# -- acceptance verdicts ---------------------------------------------------

ACCEPTANCE_CRITERIA = range(1, 11)
_verdicts: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one criterion's outcome; the line is printed in the summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _verdicts[number] = (bool(ok), detail)
        return bool(ok)

    return record


_acceptance_selected = False


@pytest.hookimpl(trylast=True)  # after -m / -k deselection
def pytest_collection_modifyitems(config, items):
    global _acceptance_selected
    _acceptance_selected = any(item.path.name == "test_acceptance.py" for item in items)


def pytest_terminal_summary(terminalreporter):
    if not (_verdicts or _acceptance_selected):
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        if n in _verdicts:
            ok, detail = _verdicts[n]
            terminalreporter.line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        else:
            terminalreporter.line(f"FAIL criterion {n}: not evaluated (skipped, deselected or errored)")
