import os

import pytest


@pytest.fixture(scope="session", autouse=True)
def _weights_cache(tmp_path_factory):
    """Point the weights cache at the test tree instead of $HOME."""
    if "STREAKFIX_CACHE_DIR" in os.environ:
        yield
        return
    cache = tmp_path_factory.mktemp("cache")
    os.environ["STREAKFIX_CACHE_DIR"] = str(cache)
    try:
        yield
    finally:
        os.environ.pop("STREAKFIX_CACHE_DIR", None)


@pytest.fixture(scope="session")
def extractor(_weights_cache):
    from streakfix.perceptual import FeatureExtractor

    return FeatureExtractor()
