from __future__ import annotations

import sys

import pytest

from growthtarget.syndata import GeneratorConfig, generate


@pytest.fixture(scope="session")
def small_world():
    """A 300-client synthetic book and its ground truth."""
    return generate(GeneratorConfig(n_clients=300, seed=5, n_competitors=400))


@pytest.fixture(scope="session")
def small_bundle(small_world):
    return small_world[0]


def pytest_terminal_summary(terminalreporter):
    # one line per acceptance criterion that ran, whatever the capture mode
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
