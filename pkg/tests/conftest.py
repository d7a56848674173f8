import pathlib
import tempfile
from typing import Generator

import numpy as np
import pytest

from cpmcmc.models import GaussianREModel, LinearGaussianSSM
from cpmcmc.streams import RandomStreams


@pytest.fixture()
def out_dir() -> Generator[str, None, None]:
    with tempfile.TemporaryDirectory() as tmp_path:
        tmp_out = pathlib.Path(tmp_path) / "out"
        tmp_out.mkdir()
        print(f"Using {tmp_out} for test output")
        yield str(tmp_out)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20220415)


@pytest.fixture()
def streams() -> RandomStreams:
    return RandomStreams(7)


@pytest.fixture()
def re_model() -> GaussianREModel:
    return GaussianREModel(theta=0.5, prior_sd=100.0)


@pytest.fixture()
def re_data(re_model: GaussianREModel) -> np.ndarray:
    """50 observations from the Gaussian random effects model"""
    return re_model.simulate(50, RandomStreams(11).simulation())


@pytest.fixture()
def ssm_model() -> LinearGaussianSSM:
    return LinearGaussianSSM(k=2, theta=0.4)


@pytest.fixture()
def ssm_data(ssm_model: LinearGaussianSSM) -> np.ndarray:
    """20 observations from the k=2 linear Gaussian state-space model"""
    return ssm_model.simulate(20, RandomStreams(13).simulation())
