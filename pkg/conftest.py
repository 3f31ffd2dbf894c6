"""Pytest configuration: puts the project root on sys.path and gates slow ensemble tests."""

import sys
import os

import pytest

sys.path.insert(0, os.path.dirname(__file__))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow statistical and multi-seed tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long multi-seed statistical check (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
