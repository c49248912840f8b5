import numpy as np
import pytest

from biasguide import config, data

TINY = {
    "data": {"per_class_count": 100, "test_per_class": 40, "image_size": 16},
    "model": {"channels": [4, 8]},
    "ensemble": {"count": 3, "iters": 20},
    "tracker": {"t1": 10, "log_every": 10},
    "guidance": {"t2": 30},
    "train": {"total_iters": 60, "batch_size": 16, "eval_every": 20, "checkpoint_every": 30},
}


@pytest.fixture
def tiny_cfg():
    return config.from_dict(TINY)


@pytest.fixture(scope="session")
def tiny_dataset():
    return data.generate(config.from_dict(TINY).data, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
