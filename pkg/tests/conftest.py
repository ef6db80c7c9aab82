import os

# single BLAS thread: reproducible timings and bitwise-stable reductions
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from sce import data  # noqa: E402
from sce.tokenizer import train_bpe  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_records():
    return data.make_toy_corpus(2000, seed=0)


@pytest.fixture(scope="session")
def toy_split(toy_records):
    return data.stratified_split(toy_records, seed=0)


@pytest.fixture(scope="session")
def toy_vocab(toy_split):
    return train_bpe([r.text for r in toy_split.train], 4000)


@pytest.fixture(scope="session")
def small_split():
    recs = data.make_toy_corpus(200, seed=3)
    return data.stratified_split(recs, seed=3)


@pytest.fixture(scope="session")
def small_vocab(small_split):
    return train_bpe([r.text for r in small_split.train], 500)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
