import pathlib
import sys

import numpy as np
import pytest

ROOT = pathlib.Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from binflow.autodiff import fresh_tape, precision  # noqa: E402


@pytest.fixture
def f64():
    """Run a test at 64-bit precision on a clean tape."""
    with precision("float64"), fresh_tape():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def numeric_gradient(fn, arrays, index, step=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` with respect to ``arrays[index]``."""
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = target[idx]
        target[idx] = original + step
        plus = fn(*arrays)
        target[idx] = original - step
        minus = fn(*arrays)
        target[idx] = original
        grad[idx] = (plus - minus) / (2 * step)
    return grad


# Desk-scale run settings shared by the pipeline and ablation tests.
TINY = [
    "model.dim=8",
    "model.layers=1",
    "model.heads=2",
    "model.dropout=0.0",
    "model.max_positions=64",
    "bpe.merge_count=40",
    "bpe.candidates=20,40",
    "bpe.max_discrepancy=1.0",
    "train.batch_size=4",
    "train.accumulate=1",
    "train.pretrain_steps=2",
    "train.max_steps=3",
    "train.warmup=1",
    "train.checkpoint_every=2",
    "detector.hidden=4",
    "detector.layers=1",
    "detector.epochs=2",
    "detector.batch_size=8",
    "detector.window=64",
    "toy.count=30",
    "toy.heldout=6",
    "toy.binaries=40",
    "toy.max_ops=6",
]
