import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dwols import StageSpec  # noqa: E402
from simulate import generate_one_stage, generate_multistage, scenario_config, two_stage_specs  # noqa: E402
from tabledesign import DataTable, ProxyGroup, TrialDataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def one_stage_data():
    return generate_one_stage(600, seed=11)


@pytest.fixture
def one_stage_specs():
    return (StageSpec.from_strings(1, "A", "1 + X", "1 + X", "1 + X"),)


@pytest.fixture(scope="session")
def two_stage_data():
    return generate_multistage(scenario_config("multistage-1", n=800), seed=3)


@pytest.fixture
def two_stage():
    return two_stage_specs()


@pytest.fixture
def small_trial():
    """Ten patients, one covariate measured twice, hand-checkable values"""
    x1 = np.array([-1.2, -0.4, 0.3, 1.1, 0.8, -0.9, 0.1, 1.6, -1.5, 0.5])
    x2 = x1 + np.array([0.2, -0.1, 0.15, -0.3, 0.05, 0.1, -0.2, 0.25, -0.05, 0.0])
    a = np.array([0, 1, 0, 1, 1, 0, 1, 0, 0, 1], dtype=float)
    y = 0.5 * x1 + a * (1.0 + x1) + np.array([0.1, -0.2, 0.05, 0.0, 0.3, -0.1, 0.2, -0.3, 0.1, 0.0])
    table = DataTable({"X_p1": x1, "X_p2": x2, "A": a, "Y": y})
    return TrialDataset(table, (ProxyGroup.scalar("X", ["X_p1", "X_p2"]),), ("A",), "Y")
