import numpy as np
import pytest

from layerpot import TorusGrid, coefficient_field_from_config

# operator bundles are cached per field object, so share fields per session
_FIELDS = {}


def field_for(family, n=1, N=64, m=1, L=2 * np.pi, **kw):
    key = (family, n, N, m, L, repr(sorted(kw.items())))
    if key not in _FIELDS:
        grid = TorusGrid(n=n, N=N, L=L, m=m)
        _FIELDS[key] = coefficient_field_from_config(grid, {"family": family, **kw})
    return _FIELDS[key]


@pytest.fixture(scope="session")
def grid64():
    return TorusGrid(n=1, N=64)


@pytest.fixture(scope="session")
def grid128():
    return TorusGrid(n=1, N=128)


@pytest.fixture(scope="session")
def identity64():
    return field_for("identity", N=64)


@pytest.fixture(scope="session")
def constant64():
    return field_for("constant", N=64)


@pytest.fixture(scope="session")
def hermitian64():
    return field_for("hermitian_random", N=64, seed=3)


@pytest.fixture(scope="session")
def block64():
    return field_for("block", N=64)


@pytest.fixture(scope="session")
def kkpt64():
    return field_for("kkpt", N=64, k=0.5)
