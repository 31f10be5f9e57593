import numpy as np
import pytest

from workbench import data, models
from workbench.attacks import ThreatModel

EPS = 0.05


@pytest.fixture(scope="session")
def rings():
    return data.make_dataset("rings2d", 1000, 0), data.make_dataset("rings2d", 200, [0, 1])


@pytest.fixture(scope="session")
def rings_model(rings):
    train, _ = rings
    base = models.init_classifier((2, 32, 32), 2, seed=0)
    return models.train_standard(base, train, models.TrainConfig(epochs=30, batch_size=32))


@pytest.fixture(scope="session")
def robust_model(rings):
    train, _ = rings
    base = models.init_classifier((2, 32, 32), 2, seed=0)
    cfg = models.TrainConfig(epochs=20, batch_size=32, attack_steps=10)
    return models.train_adversarial(base, train, ThreatModel("inf", EPS), cfg)


@pytest.fixture(scope="session")
def grid_data():
    return data.make_dataset("gridpatterns64", 600, 0), data.make_dataset("gridpatterns64", 100, [0, 1])


@pytest.fixture(scope="session")
def grid_model(grid_data):
    train, _ = grid_data
    base = models.init_classifier((64, 32), 10, seed=0)
    return models.train_standard(base, train, models.TrainConfig(epochs=10, batch_size=32, lr=0.02))


@pytest.fixture
def threat():
    return ThreatModel("inf", EPS)


def unit_grid(n=100):
    g = np.linspace(0.0, 1.0, n)
    return np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
