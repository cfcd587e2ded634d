"""Acceptance gate: every criterion at its stated tolerance, one PASS/FAIL line each."""

import pytest

from casp.acceptance import CHECKS

import conftest

KEYS = [f"AC{i}" for i in range(1, 11)]


@pytest.mark.parametrize("key", KEYS)
def test_acceptance(key):
    res = CHECKS[key]()
    line = res.line()
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert res.passed, line
