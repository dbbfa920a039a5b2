import numpy as np
import pytest

from hesearch.backend import PlainBackend
from hesearch.ckks import CkksBackend
from hesearch.presets import DESK_PARAMS, TOY_PARAMS


@pytest.fixture(scope="session")
def toy_backend():
    return CkksBackend(TOY_PARAMS)


@pytest.fixture(scope="session")
def toy_keys(toy_backend):
    return toy_backend.keygen(7)


@pytest.fixture(scope="session")
def desk_backend():
    return CkksBackend(DESK_PARAMS)


@pytest.fixture(scope="session")
def desk_keys(desk_backend):
    return desk_backend.keygen(1)


@pytest.fixture()
def plain_backend():
    return PlainBackend()


@pytest.fixture()
def plain_keys(plain_backend):
    return plain_backend.keygen(7)


@pytest.fixture(scope="session")
def warm_toy(toy_backend, toy_keys):
    """Force numba JIT compilation before any timed section runs."""
    ct = toy_backend.encrypt(toy_keys.public_key, 1.0)
    toy_backend.decrypt(toy_keys.secret_key, toy_backend.hmul(ct, ct, toy_keys.relin_key))
    return toy_backend


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240901)
