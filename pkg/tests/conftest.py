"""Shared numerical helpers for the test suite."""

import numpy as np

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines after the run, uncaptured."""
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rel_err(actual, expected):
    """Max elementwise discrepancy, relative once values exceed unit scale.

    |a - e| / max(1, max|e|), the form used by every gradient tolerance in
    this suite.
    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if expected.size == 0 and actual.size == 0:
        return 0.0
    denom = max(1.0, float(np.max(np.abs(expected))))
    return float(np.max(np.abs(actual - expected))) / denom


def finite_diff_grad(fn, arrays, index, h=1e-5):
    """Central-difference gradient of scalar fn(arrays) w.r.t. arrays[index]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(arrays[index])
    flat = arrays[index].ravel()
    gflat = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = fn(arrays)
        flat[k] = orig - h
        down = fn(arrays)
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * h)
    return grad
