import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # scorecards fixtures

from vflarena.datasets import DatasetSpec, generate_synthetic


@pytest.fixture(scope="session")
def binary_pair():
    spec = DatasetSpec("synthetic-binary-balanced", n_train=800, n_test=400,
                       dims_a=6, dims_b=6, seed=3)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def imbalanced_pair():
    spec = DatasetSpec("synthetic-binary-imbalanced", n_train=1000, n_test=500,
                       dims_a=6, dims_b=6, seed=5)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def pattern_pair():
    spec = DatasetSpec("synthetic-image-pattern", n_train=400, n_test=160,
                       dims_a=0, dims_b=0, num_classes=4, image_side=16, seed=9)
    return generate_synthetic(spec)
