import os
from pathlib import Path

import pytest

from snapens import data, models, optim
from helpers import teacher_dataset

REPO = Path(__file__).resolve().parents[1]


def _data_dir(env, default):
    path = os.environ.get(env) or str(REPO / "data" / default)
    return Path(path) if Path(path).is_dir() else None


@pytest.fixture(scope="session")
def mnist_dir():
    path = _data_dir(data.MNIST_ENV, "mnist")
    if path is None or not any(path.glob("train-images-idx3-ubyte*")):
        pytest.skip(f"MNIST not available (set ${data.MNIST_ENV})")
    return path


@pytest.fixture(scope="session")
def cifar10_dir():
    path = _data_dir(data.CIFAR10_ENV, "cifar10")
    if path is None or not (any(path.glob("data_batch_1.bin*")) or (path / "cifar-10-batches-bin").is_dir()):
        pytest.skip(f"CIFAR-10 not available (set ${data.CIFAR10_ENV})")
    return path


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return data.load_mnist(mnist_dir)


@pytest.fixture(scope="session")
def trained_mnist_model():
    """MNIST_NET fitted for a few hundred steps on teacher-labelled noise."""
    x, y = teacher_dataset(512)
    params = models.init_parameters(models.Architecture.MNIST_NET, 1)
    opt = optim.Optimizer(optim.OptimizerConfig("HB", 0.02, 0.9))
    batcher = data.Batcher(32, seed=0)
    for _ in range(10):
        for idx in batcher.epoch(len(y)):
            _, grads, _ = models.backward(params, x[idx], y[idx], need_input=False)
            opt.step(params, grads)
    return params, x, y


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
