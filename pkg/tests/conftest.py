import sys

import numpy as np
import pytest


def random_state(rng, nmodes, decay=0.2, batch=()):
    k = np.arange(1, nmodes + 1)
    shape = batch + (nmodes,)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.exp(-decay * k)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion that ran."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
