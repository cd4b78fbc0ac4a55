import pytest

from cosimpf import backends, modelio


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # pay any JIT compile cost before timed assertions run
    backends.warmup()


@pytest.fixture(scope="session")
def ts1():
    return modelio.load_models(modelio.fixture_path("ts1.json"))


@pytest.fixture(scope="session")
def ts2():
    return modelio.load_models(modelio.fixture_path("ts2.json"))
