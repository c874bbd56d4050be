import os

import hypothesis
import numpy as np
import pytest

from kpldf import generate_dataset, label_dataset

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run the end-to-end training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training run, minutes of CPU")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def small_dataset():
    """A labeled dataset of 60 eight-item instances."""
    return label_dataset(generate_dataset(n_items=8, n_instances=60, seed=11))


@pytest.fixture(scope="session")
def desk_dataset():
    """The desk-scale labeled dataset: 4000 instances of 100 items."""
    return label_dataset(generate_dataset(n_items=100, n_instances=4000, seed=2024), workers=4)
