"""
Shared test setup: puts backend/ on sys.path (tests import `services.*` the
way main.py does) and registers the `slow` marker for acceptance-scale
Monte Carlo runs.
"""

import sys
from pathlib import Path

import pytest

backend_dir = Path(__file__).parent
if str(backend_dir) not in sys.path:
    sys.path.insert(0, str(backend_dir))

from services.patterns import builtin_dictionary, make_pattern  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale Monte Carlo run (minutes)")


@pytest.fixture(scope="session")
def bump():
    return make_pattern("quadratic-bump", 1)


@pytest.fixture(scope="session")
def dictionary_1d():
    return builtin_dictionary(1)
