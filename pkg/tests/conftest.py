from pathlib import Path

import pytest

from medsurv.config import load_config
from medsurv.dataset import read_dataset
from medsurv.simulate import load_dgp

SAMPLE = Path(__file__).resolve().parent.parent / "sample"


@pytest.fixture
def sample_dir() -> Path:
    return SAMPLE


@pytest.fixture
def toy_config():
    return load_config(str(SAMPLE / "toy_analysis.json"))


@pytest.fixture
def toy_dataset(toy_config):
    return read_dataset(str(SAMPLE / "toy_data.csv"), toy_config.schedule, toy_config.variables)


@pytest.fixture
def dgp_proportional():
    return load_dgp(str(SAMPLE / "dgp_proportional.json"))


@pytest.fixture
def dgp_censoring():
    return load_dgp(str(SAMPLE / "dgp_censoring.json"))


@pytest.fixture
def dgp_analysis_config():
    return load_config(str(SAMPLE / "dgp_analysis.json"))
