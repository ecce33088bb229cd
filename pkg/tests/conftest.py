import numpy as np
import pytest

from shipmpc.config import RunConfig, default_config_dict, scaled_config_dict


@pytest.fixture(scope="session")
def default_config() -> RunConfig:
    return RunConfig.from_dict(default_config_dict())


@pytest.fixture(scope="session")
def scaled_config() -> RunConfig:
    return RunConfig.from_dict(scaled_config_dict())


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
