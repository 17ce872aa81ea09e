import numpy as np
import pytest

from medirl.features import SynthParams, synth_scene
from medirl.grid import build_grid


@pytest.fixture
def paper_grid():
    return build_grid(144, 256, 12, 17)


@pytest.fixture
def small_grid():
    return build_grid(24, 34, 12, 17)


@pytest.fixture
def desk_grid():
    return build_grid(72, 136, 12, 17)


@pytest.fixture
def scene(desk_grid):
    return synth_scene(11, desk_grid, 6, SynthParams(), "fixture")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion.

    Call with (number, passed, detail). The lines are printed together at the
    end of the run, in criterion order."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        with request.config.pluginmanager.get_plugin("capturemanager").global_and_fixture_disabled():
            print(f"\n{line}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
