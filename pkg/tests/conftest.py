import time
from types import SimpleNamespace

import pytest

from amortflow.amortizers import (
    build_comparison_amortizer,
    build_likelihood_amortizer,
    build_posterior_amortizer,
)
from amortflow.generative import builtin_model
from amortflow.rng import Rng
from amortflow.training import TrainConfig, train

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []

# desk-scale settings used by every test that needs a trained network
POSTERIOR_CONFIG = dict(epochs=48, batches_per_epoch=100, batch_size=64, initial_lr=1e-3, seed=1)
LIKELIHOOD_CONFIG = dict(epochs=16, batches_per_epoch=100, batch_size=64, initial_lr=1e-3, seed=3)
COMPARISON_CONFIG = dict(epochs=16, batches_per_epoch=100, batch_size=64, initial_lr=1e-3, seed=4)


def randomize(module, rng: Rng, scale: float = 0.3):
    """Overwrite every parameter with N(0, scale^2) noise so no layer is an identity."""
    for p in module.parameters():
        p.data = (scale * rng.normal(p.shape)).astype(p.dtype)
    return module


@pytest.fixture
def rng():
    return Rng(12345)


def _timed_train(amortizer, model, settings):
    start = time.process_time()
    history = train(amortizer, model, TrainConfig(**settings))
    return SimpleNamespace(amortizer=amortizer, history=history, cpu_seconds=time.process_time() - start)


@pytest.fixture(scope="session")
def trained_posterior():
    model = builtin_model("conjugate_gaussian")
    am = build_posterior_amortizer(model, rng=Rng(1))
    return _timed_train(am, model, POSTERIOR_CONFIG)


@pytest.fixture(scope="session")
def trained_likelihood():
    model = builtin_model("conjugate_gaussian")
    am = build_likelihood_amortizer(model, rng=Rng(2))
    return _timed_train(am, model, LIKELIHOOD_CONFIG)


@pytest.fixture(scope="session")
def trained_comparison():
    mixture = builtin_model("model_pair")
    am = build_comparison_amortizer(mixture, rng=Rng(1))
    return _timed_train(am, mixture, COMPARISON_CONFIG)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
