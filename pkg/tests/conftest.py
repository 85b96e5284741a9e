import sys

import numpy as np
import pytest

from cmbrec.dataset import binarize_and_split, from_arrays, load_movielens
from cmbrec.models import LatentFactors, TrainConfig, train_bprmf
from cmbrec.synthetic import write_synthetic_movielens


@pytest.fixture(scope="session")
def synth_files(tmp_path_factory):
    return write_synthetic_movielens(tmp_path_factory.mktemp("raw"), seed=7)


@pytest.fixture(scope="session")
def synth_ds(synth_files):
    raw, topics = load_movielens(*synth_files)
    return binarize_and_split(raw, seed=0, item_topics=topics)


@pytest.fixture(scope="session")
def synth_model(synth_ds):
    return train_bprmf(synth_ds, TrainConfig(d=16, epochs=25, seed=0))


@pytest.fixture
def tiny_ds():
    """5 users, 10 items, 3 subtopics."""
    train = [[0, 1], [2, 3, 4], [5], [0, 6, 7], [8]]
    valid = [[2], [5], [6], [1], [9]]
    test = [[3], [6], [7], [2], [0]]
    topics = [[0], [1], [2], [0, 1], [1, 2], [0], [2], [0, 2], [1], [0, 1, 2]]
    return from_arrays(train, valid, test, topics, n_items=10, n_subtopics=3)


@pytest.fixture
def tiny_model():
    rng = np.random.default_rng(3)
    return LatentFactors(rng.normal(size=(4, 5)), rng.normal(size=(4, 10)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
