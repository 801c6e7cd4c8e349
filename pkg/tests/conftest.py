from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from lexinet.scenario import Scenario, load_scenario

FIXTURES = Path(__file__).resolve().parent.parent / "src" / "lexinet" / "fixtures"


@pytest.fixture(scope="session")
def toy_scenario() -> Scenario:
    return load_scenario(FIXTURES / "toy_grid.json")


@pytest.fixture(scope="session")
def four_junction_scenario() -> Scenario:
    return load_scenario(FIXTURES / "four_junction.json")


@pytest.fixture(scope="session")
def saturated_scenario() -> Scenario:
    return load_scenario(FIXTURES / "saturated.json")


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20260823)
