import pytest

from refedit.forge import ForgeConfig, forge_dataset
from refedit.model import ModelConfig

TINY = ModelConfig(dim=16, blocks=2, heads=2, text_layers=1, tower_layers=1, qformer_layers=1, num_queries=4)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 24-item forged dataset shared by trainer / metrics / cli tests."""
    out = tmp_path_factory.mktemp("forged")
    forge_dataset(out, ForgeConfig(count=24, seed=5))
    return out


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
