import os

import pytest

from manifold_forge import catalog
from manifold_forge.c1_pipeline import build_c1_metric


@pytest.fixture(scope="session", autouse=True)
def lu_cache(tmp_path_factory):
    """Point the factorization cache at a session directory.

    Keeps test runs away from the user cache and lets repeated builds
    inside one session share factorizations.
    """
    directory = str(tmp_path_factory.mktemp("lucache"))
    previous = os.environ.get("MCUBE_CACHE_DIR")
    os.environ["MCUBE_CACHE_DIR"] = directory
    yield directory
    if previous is None:
        os.environ.pop("MCUBE_CACHE_DIR", None)
    else:
        os.environ["MCUBE_CACHE_DIR"] = previous


@pytest.fixture(scope="session")
def torus():
    return catalog.get("three-torus").structure


@pytest.fixture(scope="session")
def poincare():
    return catalog.get("poincare").structure


@pytest.fixture(scope="session")
def sixth_turn():
    return catalog.get("sixth-turn").structure


@pytest.fixture(scope="session")
def poincare_build8(poincare):
    """Full pipeline on the dodecahedral space at N=8, shared read-only."""
    return build_c1_metric(poincare, 8)
