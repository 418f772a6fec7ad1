from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from qprior.model import FEATURE_NAMES, Suite, TestCaseRecord

FIXTURES = Path(__file__).parent / "fixtures"


def make_record(
    test_id: str,
    coverage=(),
    exec_time: float = 1.0,
    detects=(),
    **features,
) -> TestCaseRecord:
    values = {name: 0.0 for name in FEATURE_NAMES}
    values["exec_time"] = exec_time
    values.update(features)
    return TestCaseRecord(test_id, values, frozenset(coverage), exec_time, frozenset(detects))


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def record():
    return make_record


@pytest.fixture
def tiny_suite() -> Suite:
    records = [
        make_record("t1", {"a", "b"}, 2.0, {"f1"}, code_churn=9.0),
        make_record("t2", {"b", "c"}, 1.0, (), code_churn=1.0),
        make_record("t3", {"d"}, 3.0, {"f2"}, code_churn=7.0),
        make_record("t4", {"a"}, 0.5, (), code_churn=2.0),
    ]
    return Suite.from_records("tiny", records)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# ----------------------------------------------------------- acceptance lines

ACCEPTANCE: dict[int, str] = {}


def acceptance(criterion: int, ok: bool, detail: str) -> None:
    """Record one PASS/FAIL line; the lines are repeated in the terminal summary."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(autouse=True, scope="session")
def no_network():
    """Fail loudly if anything under test tries to open an internet socket."""
    import socket

    original = socket.socket.connect

    def guarded(self, address):
        if self.family in (socket.AF_INET, socket.AF_INET6):
            raise RuntimeError(f"network access attempted: {address!r}")
        return original(self, address)

    socket.socket.connect = guarded
    yield
    socket.socket.connect = original
