import pytest
import torch

from sparseadv.data import load_digits
from sparseadv.generator import GeneratorConfig
from sparseadv.models import ClassifierHandle

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def digits_test():
    return load_digits("test")


@pytest.fixture(scope="session")
def digits_train():
    return load_digits("train")


@pytest.fixture
def tiny_classifier(digits_test):
    torch.manual_seed(0)
    f = ClassifierHandle("small-vgg", 10, digits_test.channel_mean, digits_test.channel_std,
                         digits_test.resolution)
    return f.freeze()


@pytest.fixture
def tiny_gen_cfg():
    return GeneratorConfig(base_width=8, num_residual_blocks=1, num_down=2, num_up=2)


def pytest_terminal_summary(terminalreporter, config):
    from test_acceptance import ACCEPTANCE_KEY

    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
