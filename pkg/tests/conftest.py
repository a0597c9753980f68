import os
from pathlib import Path

import numpy as np
import pytest

from exaware.mlp import Architecture, MLPModel

MNIST_DIR = Path(os.environ.get("EXAWARE_MNIST_DIR", "/root/data/mnist"))


def make_model(weights, biases=None):
    weights = [np.asarray(w, dtype=np.float64) for w in weights]
    sizes = (weights[0].shape[1],) + tuple(w.shape[0] for w in weights)
    if biases is None:
        biases = [np.zeros(w.shape[0]) for w in weights]
    return MLPModel(Architecture(sizes), weights, biases)


def eq1_model():
    """Two-neuron network a=(2,1), b=(-1,3), c=(1,2), zero biases."""
    return make_model([[[2.0, 1.0], [-1.0, 3.0]], [[1.0, 2.0]]])


def have_mnist() -> bool:
    names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
    return all((MNIST_DIR / n).is_file() for n in names)


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST IDX files not found in {MNIST_DIR}")


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
