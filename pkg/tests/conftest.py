import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


MNIST_DIR = os.environ.get("RBFSNT_MNIST_DIR", "/root/data/mnist")


def have_mnist():
    from rbfsnt.data import mnist_paths
    try:
        mnist_paths(MNIST_DIR, "train")
        mnist_paths(MNIST_DIR, "test")
    except Exception:
        return False
    return True


@pytest.fixture(scope="session")
def mnist():
    if not have_mnist():
        pytest.fail(f"MNIST IDX files not found under {MNIST_DIR}; set RBFSNT_MNIST_DIR")
    from rbfsnt.data import load_mnist
    return load_mnist(MNIST_DIR, "train"), load_mnist(MNIST_DIR, "test")


@pytest.fixture(scope="session")
def trained_mnist(mnist):
    """The reference model: four conv blocks, GAP, FC(64), 10-center quadratic RBF head.

    Trained once per session on the full 60k split for 5 epochs, single thread.
    """
    import time
    from threadpoolctl import threadpool_limits
    from rbfsnt.model import build_cnn_rbf
    from rbfsnt.trainer import TrainConfig, _rngs, train
    train_set, test_set = mnist
    config = TrainConfig(epochs=5, seed=0)
    model = build_cnn_rbf(_rngs(config.seed)[0], n_classes=10, n_centers=10,
                          kernel="quadratic")
    t0 = time.perf_counter()
    with threadpool_limits(1):
        report = train(model, train_set, config, test_set)
    return {"model": model, "report": report, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def correct_test_subset(trained_mnist, mnist):
    """Seeded 500-sample subset of test images the reference model gets right."""
    _, test_set = mnist
    model = trained_mnist["model"]
    ok = np.flatnonzero(model.predict(test_set.images) == test_set.labels)
    pick = np.sort(np.random.default_rng(2024).choice(ok, size=500, replace=False))
    return test_set.subset(pick), pick


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
