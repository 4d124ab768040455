import pytest

from duospec import tensor as T


@pytest.fixture(autouse=True, scope="session")
def finite_checks():
    """Every op output is NaN/Inf-checked throughout the test run."""
    T.CHECK_FINITE = True
    yield
    T.CHECK_FINITE = False
