import numpy as np
import pytest

from promptdepth import synthscene as ss

SMALL_K = ss.Intrinsics(fx=32.0, fy=32.0, cx=16.0, cy=16.0, width=32, height=32)


def small_samples(split, n, start=0):
    return [ss.render_sample(ss.sample_scene(split, ss.SPLIT_SALT[split] + start + i, SMALL_K)) for i in range(n)]


@pytest.fixture(scope="session")
def train32():
    return small_samples("train", 16)


@pytest.fixture(scope="session")
def val32():
    return small_samples("val", 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def criterion_report():
    """``report(k, ok, detail)`` records and prints one pass/fail line per criterion."""

    def report(k, ok, detail):
        line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES[k] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
