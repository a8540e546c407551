# conftest.py
import os

import numpy as np
import pytest

import database  # output layer


@pytest.fixture(scope="session", autouse=True)
def output_root(tmp_path_factory):
    """
    Point every run directory at a temp folder for the whole test session.
    """
    root = tmp_path_factory.mktemp("runs")
    database.OUTPUT_ROOT = str(root)
    assert os.path.isdir(root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def configs_dir():
    return os.path.join(os.path.dirname(__file__), "configs")
