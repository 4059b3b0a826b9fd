import pytest

from hyperguide.basenet import BaseNetConfig
from hyperguide.metatrain import AdaptConfig, TrainerConfig, collect_corpus, train_meta
from hyperguide.universe import UniverseConfig, task_list

UNIVERSE = UniverseConfig()


@pytest.fixture(scope="session")
def train_tasks():
    return task_list(UNIVERSE, UNIVERSE.train_indices)


@pytest.fixture(scope="session")
def small_uncond_model(train_tasks):
    """Briefly trained unconditional HNet-MAML on the first 16 training tasks."""
    tcfg = TrainerConfig(epochs=15, lr=3e-3, adapt=AdaptConfig(0.1, (0, 5), "first"), meta_batch=16)
    model, _ = train_meta("hnet-maml-uncond", train_tasks[:16], BaseNetConfig(), tcfg, seed=0)
    return model


@pytest.fixture(scope="session")
def small_corpus(small_uncond_model, train_tasks):
    return collect_corpus(small_uncond_model, train_tasks[:16], n_repeats=4, steps=20, lr=0.1, seed=1)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
