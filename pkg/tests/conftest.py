import hypothesis
import pytest

from ssta.grid import GridSpec, TileSpec, generate_fixture

hypothesis.settings.register_profile("default", deadline=None, max_examples=60)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_grid():
    return GridSpec(heads=2, frames=4, height=4, width=4, head_dim=16)


@pytest.fixture
def small_tiles():
    return TileSpec(2, 2, 2)


@pytest.fixture
def small_inputs(small_grid):
    return generate_fixture(small_grid, seed=7)

