import numpy as np
import pytest

from support import TOY_CONFIG, make_weights


@pytest.fixture(scope="session")
def toy_config():
    return TOY_CONFIG


@pytest.fixture(scope="session")
def toy_weights():
    return make_weights(TOY_CONFIG, seed=7)


@pytest.fixture()
def toy_image():
    rng = np.random.default_rng(42)
    return rng.normal(0.0, 1.0, (3, TOY_CONFIG.image_size, TOY_CONFIG.image_size))
