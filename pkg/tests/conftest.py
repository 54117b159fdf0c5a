import numpy as np
import pytest

from georank.synth import BenchConfig, build_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """12-class, 24-query medium benchmark shared by the integration tests."""
    root = tmp_path_factory.mktemp("tiny")
    build_dataset(BenchConfig.preset("medium", classes=12, queries=24, seed=3), root)
    return root


@pytest.fixture(scope="session")
def easy_data(tmp_path_factory):
    """Identity warps, no occlusion, recolour or noise."""
    root = tmp_path_factory.mktemp("easy")
    build_dataset(BenchConfig.preset("easy", classes=20, queries=20, seed=5), root)
    return root


CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line, then asserts ``ok``."""

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[CRITERIA][n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
