"""Acceptance criteria 1-10.

The whole suite runs once per session (about five minutes on one core).  One
PASS/FAIL line per criterion is printed in the terminal summary and, with
``-s``, as each test runs.
"""
import pytest

from flowmid.acceptance import run_all

pytestmark = pytest.mark.slow

LINES: list[str] = []


@pytest.fixture(scope="module")
def results(tmp_path_factory):
    out = run_all(out_dir=tmp_path_factory.mktemp("acceptance"))
    LINES[:] = [r.line() for r in out]
    return {r.number: r for r in out}


@pytest.mark.parametrize("number", range(1, 11))
def test_criterion(results, number):
    res = results[number]
    print(res.line())
    assert res.passed, res.line()
