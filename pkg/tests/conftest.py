import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def corpus_root(tmp_path_factory):
    """Small synthetic corpus in the Speech Commands layout (24 clips per keyword)."""
    from metakws.synthetic import generate_corpus

    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(root, clips_per_keyword=24, seed=3, noise_seconds=4, n_speakers=20)
    return root


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("features")
    os.environ["METAKWS_CACHE_DIR"] = str(path)
    return path


@pytest.fixture(scope="session")
def manifest(corpus_root):
    from metakws.dataset import build_manifest

    return build_manifest(corpus_root, "digits", seed=0, eval_per_class=4)


@pytest.fixture(scope="session")
def store(corpus_root, cache_dir):
    from metakws.dataset import ExampleStore, FeatureCache

    return ExampleStore(corpus_root, cache=FeatureCache(cache_dir))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
