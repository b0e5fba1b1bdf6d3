"""Acceptance battery, one test per criterion.

Runs the full ensembles (N = 512) by default; set KINSPRAY_QUICK=1 for the
smaller battery. Each test prints its PASS/FAIL line to the terminal.
"""
import os

import pytest

from kinspray.verify import CHECKS, Battery

pytestmark = pytest.mark.acceptance

QUICK = os.environ.get("KINSPRAY_QUICK", "") not in ("", "0")


@pytest.fixture(scope="module")
def battery():
    return Battery(quick=QUICK)


@pytest.mark.parametrize("cid", sorted(CHECKS))
def test_criterion(battery, cid, capsys):
    res = CHECKS[cid](battery)
    with capsys.disabled():
        print(f"\n{res.line()}")
    assert res.passed, res.details
