import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from klcox.core import SurvivalDataset  # noqa: E402


def random_dataset(rng, n=None, p=None, ties=True, censor=0.3):
    n = n or int(rng.integers(5, 31))
    p = p or int(rng.integers(1, 5))
    z = rng.normal(size=(n, p))
    t = rng.exponential(size=n) * np.exp(-0.3 * z[:, 0])
    if ties:
        t = np.ceil(t * 4) / 4 + 0.25
    s = (rng.uniform(size=n) > censor).astype(int)
    if s.sum() == 0:
        s[0] = 1
    return SurvivalDataset(t, s, z)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_subjects():
    return SurvivalDataset([1.0, 2.0], [1, 1], [[1.0], [0.0]])


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def record(criterion, passed, detail=""):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
