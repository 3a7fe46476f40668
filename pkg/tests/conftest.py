import numpy as np
import pytest

from repolab.experiment import TaskSpec, build_task, sft_init
from repolab.policy import random_bigram, random_mlp

# Filled in by test_acceptance; reported once at the end of the session.
ACCEPTANCE_RESULTS = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def bigram(rng):
    return random_bigram(5, 2, rng)


@pytest.fixture
def mlp(rng):
    return random_mlp(5, 2, 4, rng)


@pytest.fixture(scope="session")
def small_task():
    return build_task(TaskSpec(seed=7, n=200))


@pytest.fixture(scope="session")
def small_init(small_task):
    return sft_init(small_task, 20, 1.0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
