"""Shared fixtures: seeded generators, 64-bit precision and synthetic datasets."""
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from autodiff.tensor import precision, seeded_rng  # noqa: E402
from dataloader.synthetic import make_fixture  # noqa: E402

FIXTURE_CLASSES = ["anger", "happy", "neutral", "sad"]


@pytest.fixture
def rng() -> np.random.Generator:
    return seeded_rng(1234)


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


@pytest.fixture
def fixture_dataset(tmp_path) -> Path:
    """32-sample, 4-class 48×48 synthetic dataset without a split column."""
    root = tmp_path / "fixture"
    make_fixture(root, FIXTURE_CLASSES, samples_per_class=8, size=48, seed=0)
    return root


@pytest.fixture
def split_dataset(tmp_path) -> Path:
    """Synthetic dataset with a split column (2 of 8 samples per class in test)."""
    root = tmp_path / "split_fixture"
    make_fixture(root, FIXTURE_CLASSES, samples_per_class=8, size=48, seed=1, test_fraction=0.25)
    return root
